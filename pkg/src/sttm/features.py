"""Windowed order aggregates, sensitive ids, labels, and sample assembly.

Feature semantics, as of a slice end ``T`` (all windows are ``(T - w, T]``):

* stage backlogs: orders created in the last hour, not canceled by ``T``,
  whose stage timestamp is absent or later than ``T``, and whose age exceeds
  0/8/15 minutes;
* uncompleted counts and acceptance/completion rates are over orders
  *created* in the window;
* completed/canceled counts, on-time rates and average delivery times are
  over orders *delivered* (resp. canceled) in the window.

A timestamp counts only if it is ``<= T``; nothing after ``T`` is ever read.
Rates and means with an empty denominator are encoded as ``-1``.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geo
from .errors import CompatibilityError, ConfigError, ContractError
from .simulator import MINUTES_PER_DAY, MISSING, PEAK_BY_MINUTE

SENTINEL = -1.0
SLICE_SECONDS = 600
LABEL_SECONDS = 300

FEATURE_NAMES = (
    "not_arrived_store_gt0_1h",
    "not_arrived_store_gt8_1h",
    "not_arrived_store_gt15_1h",
    "not_picked_up_gt0_1h",
    "not_picked_up_gt8_1h",
    "not_picked_up_gt15_1h",
    "not_accepted_gt0_1h",
    "not_accepted_gt8_1h",
    "not_accepted_gt15_1h",
    "uncompleted_10m",
    "uncompleted_30m",
    "uncompleted_60m",
    "completed_10m",
    "completed_30m",
    "completed_45m",
    "completed_60m",
    "canceled_5m",
    "canceled_10m",
    "acceptance_rate_3m",
    "acceptance_rate_5m",
    "acceptance_rate_10m",
    "acceptance_rate_15m",
    "acceptance_rate_30m",
    "completion_rate_30m",
    "completion_rate_60m",
    "on_time_rate_10m",
    "on_time_rate_30m",
    "on_time_rate_45m",
    "on_time_rate_60m",
    "avg_delivery_minutes_30m",
    "avg_delivery_minutes_60m",
)
D_A = len(FEATURE_NAMES)
STAGE_THRESHOLDS_MIN = (0, 8, 15)
UNCOMPLETED_MIN = (10, 30, 60)
COMPLETED_MIN = (10, 30, 45, 60)
CANCELED_MIN = (5, 10)
ACCEPTANCE_MIN = (3, 5, 10, 15, 30)
COMPLETION_MIN = (30, 60)
ON_TIME_MIN = (10, 30, 45, 60)
AVG_TIME_MIN = (30, 60)
RATE_FEATURES = tuple(i for i, n in enumerate(FEATURE_NAMES) if "rate" in n or n.startswith("avg_"))

SENSITIVE_NAMES = ("city", "district", "minute", "peak", "day_of_week", "weather")
D_B = len(SENSITIVE_NAMES)
FIXED_VOCAB = {"minute": MINUTES_PER_DAY + 1, "peak": 6, "day_of_week": 8, "weather": 4}


def feature_order_hash():
    return hashlib.sha256("\n".join(FEATURE_NAMES).encode()).hexdigest()[:16]


@dataclass
class FeatureConfig:
    tick_minutes: int = 5
    warmup_minutes: int = 60
    missing_lookback_minutes: int = 120
    on_time_minutes: int = 40
    split_days: tuple = (14, 1, 3)

    def validate(self):
        if self.tick_minutes < 1:
            raise ConfigError("must be >= 1", field="features.tick_minutes")
        if len(self.split_days) != 3 or min(self.split_days) < 1:
            raise ConfigError("need three positive day counts", field="features.split_days")
        if self.missing_lookback_minutes < 1:
            raise ConfigError("must be >= 1", field="features.missing_lookback_minutes")
        return self


@dataclass
class SliceFeatures:
    district_id: int
    slice_end: int
    values: np.ndarray


@dataclass
class Sample:
    district_id: int
    sample_time: int
    x_a: np.ndarray  # (M, N, D_A)
    x_b: np.ndarray  # (D_B,)
    coords: np.ndarray  # (M, 2)
    label: float


# ---------------------------------------------------------------- aggregation

def _done(ts, t):
    return (ts != MISSING) & (ts <= t)


def _window_counts(sorted_ts, t, seconds):
    return np.searchsorted(sorted_ts, t, "right") - np.searchsorted(sorted_ts, t - seconds, "right")


def _prefix_window(sorted_ts, prefix, t, seconds):
    hi = np.searchsorted(sorted_ts, t, "right")
    lo = np.searchsorted(sorted_ts, t - seconds, "right")
    return prefix[hi] - prefix[lo]


def _rate(num, den):
    out = np.full(len(den), SENTINEL)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def aggregate_district(log, slice_ends, on_time_minutes=40):
    """Feature matrix ``(len(slice_ends), D_A)`` for one district's events.

    ``log`` must contain that district's orders only, sorted by ``created_at``.
    """
    t_all = np.asarray(slice_ends, dtype=np.int64)
    s = len(t_all)
    out = np.zeros((s, D_A))
    created = log.created_at

    # pairs (slice, order) for orders created in (T - 60min, T]
    lo = np.searchsorted(created, t_all - 3600, "right")
    hi = np.searchsorted(created, t_all, "right")
    lengths = hi - lo
    pair_slice = np.repeat(np.arange(s), lengths)
    offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    pair_order = np.repeat(lo, lengths) + offsets
    t = t_all[pair_slice]
    age = t - created[pair_order]
    canceled = _done(log.canceled_at[pair_order], t)
    delivered = _done(log.delivered_at[pair_order], t)
    accepted = _done(log.accepted_at[pair_order], t)

    def count(mask):
        return np.bincount(pair_slice, weights=mask, minlength=s)

    col = 0
    for stage in ("arrived_store_at", "picked_up_at", "accepted_at"):
        pending = ~canceled & ~_done(log.columns[stage][pair_order], t)
        for k in STAGE_THRESHOLDS_MIN:
            out[:, col] = count(pending & (age > k * 60))
            col += 1
    for w in UNCOMPLETED_MIN:
        out[:, col] = count((age < w * 60) & ~delivered & ~canceled)
        col += 1

    d_mask = log.delivered_at != MISSING
    d_ts = log.delivered_at[d_mask]
    d_order = np.argsort(d_ts, kind="stable")
    d_ts = d_ts[d_order]
    d_dur = (log.delivered_at - created)[d_mask][d_order]
    c_ts = np.sort(log.canceled_at[log.canceled_at != MISSING])

    for w in COMPLETED_MIN:
        out[:, col] = _window_counts(d_ts, t_all, w * 60)
        col += 1
    for w in CANCELED_MIN:
        out[:, col] = _window_counts(c_ts, t_all, w * 60)
        col += 1
    for w in ACCEPTANCE_MIN:
        in_w = age < w * 60
        out[:, col] = _rate(count(in_w & accepted), count(in_w))
        col += 1
    for w in COMPLETION_MIN:
        in_w = age < w * 60
        out[:, col] = _rate(count(in_w & delivered), count(in_w))
        col += 1
    on_time_prefix = np.concatenate([[0], np.cumsum(d_dur <= on_time_minutes * 60)])
    for w in ON_TIME_MIN:
        n = _window_counts(d_ts, t_all, w * 60)
        out[:, col] = _rate(_prefix_window(d_ts, on_time_prefix, t_all, w * 60), n)
        col += 1
    dur_prefix = np.concatenate([[0], np.cumsum(d_dur)])
    for w in AVG_TIME_MIN:
        n = _window_counts(d_ts, t_all, w * 60)
        total = _prefix_window(d_ts, dur_prefix, t_all, w * 60)
        out[:, col] = _rate(total / 60.0, n)
        col += 1
    assert col == D_A
    return out


def aggregate_slice(log, district_id, slice_end, on_time_minutes=40):
    """Single-slice convenience wrapper around :func:`aggregate_district`."""
    sub = log.for_district(district_id)
    values = aggregate_district(sub, [slice_end], on_time_minutes)[0]
    return SliceFeatures(district_id, int(slice_end), values)


def _label_stats(log, times):
    """(sum of durations in seconds, delivered count) over orders created in (T, T+5min]."""
    created = log.created_at
    delivered = log.delivered_at != MISSING
    dur = np.where(delivered, log.delivered_at - created, 0)
    dur_prefix = np.concatenate([[0], np.cumsum(dur)])
    cnt_prefix = np.concatenate([[0], np.cumsum(delivered)])
    lo = np.searchsorted(created, times, "right")
    hi = np.searchsorted(created, np.asarray(times) + LABEL_SECONDS, "right")
    return dur_prefix[hi] - dur_prefix[lo], cnt_prefix[hi] - cnt_prefix[lo]


def compute_label(log, district_id, sample_time):
    """Mean delivery minutes of orders created in the next 5 minutes, or ``None``."""
    total, n = _label_stats(log.for_district(district_id), np.array([sample_time]))
    if n[0] == 0:
        return None
    return total[0] / n[0] / 60.0


# ----------------------------------------------------------- sensitive ids

def minute_id(t):
    """Minute of day in 1..1440; midnight maps to 1440."""
    m = (np.asarray(t, dtype=np.int64) // 60) % MINUTES_PER_DAY
    return np.where(m == 0, MINUTES_PER_DAY, m)


def day_of_week(t):
    """ISO weekday, Monday = 1 (1970-01-01 was a Thursday)."""
    return (np.asarray(t, dtype=np.int64) // 86400 + 3) % 7 + 1


@dataclass
class SensitiveVocab:
    cities: dict = field(default_factory=dict)
    districts: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, cities, district_ids):
        cs = {c: i + 1 for i, c in enumerate(sorted(set(cities)))}
        ds = {int(d): i + 1 for i, d in enumerate(sorted(set(int(x) for x in district_ids)))}
        return cls(cs, ds)

    def sizes(self):
        return (
            len(self.cities) + 1,
            len(self.districts) + 1,
            FIXED_VOCAB["minute"],
            FIXED_VOCAB["peak"],
            FIXED_VOCAB["day_of_week"],
            FIXED_VOCAB["weather"],
        )

    def city_id(self, city):
        return self.cities.get(city, 0)

    def district_id(self, district):
        return self.districts.get(int(district), 0)

    def to_json(self):
        return {"cities": self.cities, "districts": {str(k): v for k, v in self.districts.items()}}

    @classmethod
    def from_json(cls, d):
        return cls(dict(d["cities"]), {int(k): v for k, v in d["districts"].items()})


def build_sensitive(district, sample_time, calendar, vocab=None):
    """(city, district, minute, peak, day_of_week, weather) ids for one sample.

    Without a ``vocab`` the raw district id is returned and the city id is 1.
    """
    city = vocab.city_id(district.city) if vocab else 1
    did = vocab.district_id(district.district_id) if vocab else district.district_id
    t = int(sample_time)
    return (
        city,
        did,
        int(minute_id(t)),
        calendar.peak_label(t),
        int(day_of_week(t)),
        calendar.weather_level(district.district_id, t),
    )


# ------------------------------------------------------------ normalization

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def hash(self):
        h = hashlib.sha256()
        for a in (self.mean, self.std, self.constant.astype(np.uint8)):
            h.update(np.ascontiguousarray(a, dtype=a.dtype).tobytes())
        return h.hexdigest()[:16]

    def to_json(self):
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.astype(bool).tolist(),
            "feature_order_hash": feature_order_hash(),
        }

    @classmethod
    def from_json(cls, d):
        if d.get("feature_order_hash") != feature_order_hash():
            raise CompatibilityError("normalization stats were built for a different feature order")
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["constant"], dtype=bool))


def fit_stats(values, weights=None):
    """Per-feature weighted mean/std over rows of ``values``, skipping sentinels."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ContractError("cannot fit normalization on an empty training split")
    w = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=np.float64)
    valid = values != SENTINEL
    ww = w[:, None] * valid
    tot = ww.sum(axis=0)
    safe = np.where(tot > 0, tot, 1.0)
    mean = (ww * np.where(valid, values, 0.0)).sum(axis=0) / safe
    var = (ww * np.where(valid, values - mean, 0.0) ** 2).sum(axis=0) / safe
    std = np.sqrt(var)
    constant = (tot == 0) | (std <= 1e-12)
    mean = np.where(tot > 0, mean, 0.0)
    std = np.where(constant, 1.0, std)
    return NormalizationStats(mean, std, constant)


def normalize_values(values, stats):
    values = np.asarray(values, dtype=np.float64)
    z = (values - stats.mean) / stats.std
    z = np.where(stats.constant, 0.0, z)
    return np.where(values == SENTINEL, SENTINEL, z)


def denormalize_values(values, stats):
    """Inverse of :func:`normalize_values` (constant features return their mean)."""
    values = np.asarray(values, dtype=np.float64)
    raw = values * stats.std + stats.mean
    return np.where(values == SENTINEL, SENTINEL, raw)


def apply_normalization(sample, stats):
    return Sample(
        sample.district_id,
        sample.sample_time,
        normalize_values(sample.x_a, stats),
        sample.x_b,
        sample.coords,
        sample.label,
    )


# ------------------------------------------------------------------ dataset

class Dataset:
    """Compact sample store.

    ``x_a`` is never stored per sample; each sample keeps an index of slice
    rows (``-1`` for a missing district) into a shared feature table, so any
    sample's M x N x D_A tensor is an exact gather.
    """

    def __init__(self, table, slice_index, coords, x_b, labels, district_ids, sample_times,
                 neighbor_ids, stats=None, meta=None):
        self.table = np.asarray(table, dtype=np.float64)
        self.slice_index = np.asarray(slice_index, dtype=np.int64)
        self.coords = np.asarray(coords, dtype=np.int64)
        self.x_b = np.asarray(x_b, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.district_ids = np.asarray(district_ids, dtype=np.int64)
        self.sample_times = np.asarray(sample_times, dtype=np.int64)
        self.neighbor_ids = np.asarray(neighbor_ids, dtype=np.int64)
        self.meta = dict(meta or {})
        self._stats = None
        self._norm_table = None
        if stats is not None:
            self.set_stats(stats)

    def __len__(self):
        return len(self.labels)

    @property
    def m(self):
        return self.slice_index.shape[1]

    @property
    def n(self):
        return self.slice_index.shape[2]

    @property
    def stats(self):
        return self._stats

    def set_stats(self, stats):
        self._stats = stats
        self._norm_table = normalize_values(self.table, stats)

    def x_a(self, idx=None, normalized=True):
        rows = self.slice_index if idx is None else self.slice_index[idx]
        table = self._norm_table if normalized and self._norm_table is not None else self.table
        out = table[np.maximum(rows, 0)]
        out[rows < 0] = SENTINEL
        return out

    def sample(self, i, normalized=True):
        return Sample(
            int(self.district_ids[i]),
            int(self.sample_times[i]),
            self.x_a(np.array([i]), normalized)[0],
            self.x_b[i].copy(),
            self.coords[i].copy(),
            float(self.labels[i]),
        )

    def subset(self, mask_or_idx):
        sel = np.asarray(mask_or_idx)
        ds = Dataset(
            self.table,
            self.slice_index[sel],
            self.coords[sel],
            self.x_b[sel],
            self.labels[sel],
            self.district_ids[sel],
            self.sample_times[sel],
            self.neighbor_ids[sel],
            meta=self.meta,
        )
        ds._stats, ds._norm_table = self._stats, self._norm_table
        return ds

    def truncate(self, m=None, n=None):
        """Keep the ``m`` nearest districts and/or the ``n`` most recent slices."""
        m = self.m if m is None else m
        n = self.n if n is None else n
        if not (1 <= m <= self.m and 1 <= n <= self.n):
            raise ConfigError(f"cannot truncate M={self.m},N={self.n} to M={m},N={n}", field="M/N")
        ds = self.subset(np.arange(len(self)))
        ds.slice_index = self.slice_index[:, :m, self.n - n:].copy()
        ds.coords = self.coords[:, :m].copy()
        ds.neighbor_ids = self.neighbor_ids[:, :m].copy()
        return ds

    def fingerprint(self):
        h = hashlib.sha256()
        for a in (self.table, self.slice_index, self.coords, self.x_b, self.labels,
                  self.district_ids, self.sample_times, self.neighbor_ids):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(feature_order_hash().encode())
        if self._stats is not None:
            h.update(self._stats.hash().encode())
        return h.hexdigest()[:16]

    # -- persistence

    def save(self, path):
        header = dict(self.meta)
        header.update(
            m=self.m,
            n=self.n,
            d_a=D_A,
            d_b=D_B,
            feature_order_hash=feature_order_hash(),
            stats_hash=self._stats.hash() if self._stats is not None else None,
            fingerprint=self.fingerprint(),
            n_samples=len(self),
        )
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                table=self.table,
                slice_index=self.slice_index,
                coords=self.coords,
                x_b=self.x_b,
                labels=self.labels,
                district_ids=self.district_ids,
                sample_times=self.sample_times,
                neighbor_ids=self.neighbor_ids,
            )
        return header

    @classmethod
    def load(cls, path, stats=None):
        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            if header.get("feature_order_hash") != feature_order_hash():
                raise CompatibilityError(f"{path}: feature order hash mismatch")
            if stats is not None and header.get("stats_hash") not in (None, stats.hash()):
                raise CompatibilityError(f"{path}: normalization stats hash mismatch")
            ds = cls(
                z["table"], z["slice_index"], z["coords"], z["x_b"], z["labels"],
                z["district_ids"], z["sample_times"], z["neighbor_ids"], stats=stats,
                meta={k: v for k, v in header.items()
                      if k not in ("fingerprint", "n_samples", "stats_hash", "m", "n", "d_a", "d_b")},
            )
        verifiable = (header.get("stats_hash") is None) == (stats is None)
        if verifiable and ds.fingerprint() != header["fingerprint"]:
            raise CompatibilityError(f"{path}: content does not match its header fingerprint")
        return ds


# ----------------------------------------------------------------- assembly

def schedule_ticks(start_epoch, days, open_hour, close_hour, config):
    """Sample times: every tick from open + warmup through close - label horizon."""
    ticks = []
    first = open_hour * 3600 + config.warmup_minutes * 60
    last = close_hour * 3600 - LABEL_SECONDS
    step = config.tick_minutes * 60
    for day in range(days):
        base = start_epoch + day * 86400
        ticks.extend(range(base + first, base + last + 1, step))
    return np.array(ticks, dtype=np.int64)


def assemble_samples(log, districts, contexts, calendar, ticks, m, n, config=None, horizon=None):
    """Build a :class:`Dataset` with one sample per (district, tick) that has a label.

    ``districts`` carry scaled coordinates; ``contexts`` maps district id to a
    :class:`geo.NeighborContext` built with at least ``m`` neighbors.
    """
    config = config or FeatureConfig()
    ticks = np.asarray(ticks, dtype=np.int64)
    if horizon is not None and len(ticks):
        lo, hi = horizon
        if ticks.min() < lo or ticks.max() + LABEL_SECONDS > hi:
            raise ConfigError(f"schedule [{ticks.min()}, {ticks.max()}] outside horizon {horizon}",
                              field="schedule")
    ids = [d.district_id for d in districts]
    pos = {did: i for i, did in enumerate(ids)}
    by_id = {d.district_id: d for d in districts}
    for did in ids:
        if len(contexts[did].neighbor_ids) < m:
            raise ConfigError(f"neighbor context for {did} has fewer than M={m} ids", field="M")

    # shared slice grid: every time any sample's slices end at
    if len(ticks) == 0:
        grid = np.zeros(0, dtype=np.int64)
    else:
        grid = np.unique(np.concatenate([ticks - k * SLICE_SECONDS for k in range(n)]))
    g = len(grid)

    logs = {did: log.for_district(did) for did in ids}
    table = np.concatenate(
        [aggregate_district(logs[did], grid, config.on_time_minutes) for did in ids]
    ) if g else np.zeros((0, D_A))

    missing_s = config.missing_lookback_minutes * 60
    active = {}
    for did in ids:
        created = logs[did].created_at
        active[did] = _window_counts(created, ticks, missing_s) > 0

    rows = []
    for did in ids:
        total, cnt = _label_stats(logs[did], ticks)
        has = cnt > 0
        if not has.any():
            continue
        t_sel = ticks[has]
        tick_pos = np.nonzero(has)[0]
        labels = total[has] / cnt[has] / 60.0
        ctx = contexts[did]
        nb = list(ctx.neighbor_ids[:m])
        coords = np.array(ctx.relative_coords[:m], dtype=np.int64)
        slice_times = t_sel[:, None] - (n - 1 - np.arange(n))[None, :] * SLICE_SECONDS
        gidx = np.searchsorted(grid, slice_times)
        idx = np.empty((len(t_sel), m, n), dtype=np.int64)
        for j, nid in enumerate(nb):
            block = pos[nid] * g + gidx
            idx[:, j, :] = np.where(active[nid][tick_pos][:, None], block, -1)
        city = np.ones(len(t_sel), dtype=np.int64)
        minute = minute_id(t_sel)
        peak = PEAK_BY_MINUTE[(t_sel // 60) % MINUTES_PER_DAY]
        dow = day_of_week(t_sel)
        weather = calendar.weather_levels_at(np.full(len(t_sel), did), t_sel)
        xb = np.stack([city, np.full(len(t_sel), did), minute, peak, dow, weather], axis=1)
        rows.append((t_sel, did, labels, idx, coords, xb, nb))

    if not rows:
        return Dataset(table, np.zeros((0, m, n)), np.zeros((0, m, 2)), np.zeros((0, D_B)),
                       [], [], [], np.zeros((0, m)))
    times = np.concatenate([r[0] for r in rows])
    dists = np.concatenate([np.full(len(r[0]), r[1]) for r in rows])
    order = np.lexsort((dists, times))
    cities = {d.city for d in districts}
    ds = Dataset(
        table,
        np.concatenate([r[3] for r in rows])[order],
        np.concatenate([np.broadcast_to(r[4], (len(r[0]), m, 2)) for r in rows])[order],
        np.concatenate([r[5] for r in rows])[order],
        np.concatenate([r[2] for r in rows])[order],
        dists[order],
        times[order],
        np.concatenate([np.broadcast_to(np.array(r[6]), (len(r[0]), m)) for r in rows])[order],
        meta={"cities": {str(d.district_id): d.city for d in districts},
              "n_cities": len(cities)},
    )
    return ds


def encode_sensitive(ds, vocab):
    """Replace raw city/district columns with vocabulary ids (unknown -> 0)."""
    cities = ds.meta.get("cities", {})
    x_b = ds.x_b.copy()
    raw = ds.x_b[:, 1]
    x_b[:, 0] = [vocab.city_id(cities.get(str(d), "default")) for d in raw]
    x_b[:, 1] = [vocab.district_id(d) for d in raw]
    out = ds.subset(np.arange(len(ds)))
    out.x_b = x_b
    return out


def split_dataset(ds, boundaries):
    """Chronological split by ``sample_time``: [.., b0), [b0, b1), [b1, ..)."""
    b0, b1 = boundaries
    if not b0 <= b1:
        raise ConfigError("split boundaries must be chronological", field="features.split_days")
    t = ds.sample_times
    parts = (ds.subset(t < b0), ds.subset((t >= b0) & (t < b1)), ds.subset(t >= b1))
    for name, part in zip(("train", "validation", "test"), parts):
        if len(part) == 0:
            raise ConfigError(f"{name} split is empty", field="features.split_days")
    return parts


def fit_normalization(train):
    """Stats over every (sample, district, slice) entry of the training split."""
    refs = train.slice_index[train.slice_index >= 0]
    weights = np.bincount(refs, minlength=len(train.table)).astype(np.float64)
    keep = weights > 0
    if not keep.any():
        raise ContractError("training split references no feature rows")
    return fit_stats(train.table[keep], weights[keep])


@dataclass
class PreparedData:
    train: Dataset
    validation: Dataset
    test: Dataset
    stats: NormalizationStats
    vocab: SensitiveVocab
    districts: list


def prepare(log, districts, calendar, sim_config, m, n, n_x, n_y, config=None):
    """Full featurization: geo context, samples, split, vocab, normalization."""
    config = (config or FeatureConfig()).validate()
    scaled, contexts = geo.build_contexts(districts, m, n_x, n_y)
    ticks = schedule_ticks(sim_config.start_epoch, sim_config.days, sim_config.open_hour,
                           sim_config.close_hour, config)
    horizon = (sim_config.start_epoch, sim_config.end_epoch)
    ds = assemble_samples(log, scaled, contexts, calendar, ticks, m, n, config, horizon=horizon)
    day = 86400
    tr, va, _ = config.split_days
    if sum(config.split_days) > sim_config.days:
        raise ConfigError(f"split_days {config.split_days} exceed simulated days {sim_config.days}",
                          field="features.split_days")
    b0 = sim_config.start_epoch + tr * day
    b1 = b0 + va * day
    ds = ds.subset(ds.sample_times < b1 + config.split_days[2] * day)
    train_raw, _, _ = split_dataset(ds, (b0, b1))
    vocab = SensitiveVocab.fit(
        [d.city for d in scaled if d.district_id in set(train_raw.district_ids.tolist())],
        train_raw.district_ids,
    )
    ds = encode_sensitive(ds, vocab)
    train, val, test = split_dataset(ds, (b0, b1))
    stats = fit_normalization(train)
    for part in (ds, train, val, test):
        part.set_stats(stats)
    for part in (train, val, test):
        part.meta.update(vocab=vocab.to_json(), vocab_sizes=list(vocab.sizes()))
    return PreparedData(train, val, test, stats, vocab, scaled)


def stats_to_file(path, stats):
    with open(path, "w") as fh:
        json.dump(stats.to_json(), fh, indent=1, sort_keys=True)


def stats_from_file(path):
    with open(path) as fh:
        return NormalizationStats.from_json(json.load(fh))


def config_dict(config):
    d = asdict(config)
    d["split_days"] = list(config.split_days)
    return d
