"""Synthetic on-demand delivery order streams.

Arrivals are Poisson per minute with intensity ``base rate x district factor x
peak multiplier``. Each order's duration is a lognormal base stretched by the
weather level, an autocorrelated per-district supply factor, and a congestion
term that grows with the number of open orders relative to rider capacity.
Weather events cover a district plus its nearest neighbors so that shocks are
spatially correlated.
"""

import calendar as _calendar
import hashlib
import heapq
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import geo
from .errors import ConfigError, ParseError

MISSING = -1
MINUTES_PER_DAY = 1440
DRAIN_SECONDS = 4 * 3600
MAX_DURATION_MIN = 240.0
MIN_DURATION_MIN = 5.0

PEAK_LABELS = ("off_peak", "breakfast", "morning_rush", "afternoon_tea", "evening_rush", "night_snack")
WEATHER_LEVELS = ("normal", "slightly_bad", "bad", "extremely_bad")

# [start, end) minute of day for each named peak; everything else is off-peak
PEAK_WINDOWS = {
    "breakfast": (7 * 60, 9 * 60),
    "morning_rush": (11 * 60, 13 * 60 + 30),
    "afternoon_tea": (14 * 60 + 30, 16 * 60 + 30),
    "evening_rush": (17 * 60, 19 * 60 + 30),
    "night_snack": (21 * 60, 24 * 60),
}

EVENT_FIELDS = (
    "order_id",
    "district_id",
    "created_at",
    "accepted_at",
    "arrived_store_at",
    "picked_up_at",
    "delivered_at",
    "canceled_at",
)
TIMESTAMP_FIELDS = EVENT_FIELDS[2:]


def _default_peaks():
    return {
        "off_peak": 1.0,
        "breakfast": 1.3,
        "morning_rush": 2.5,
        "afternoon_tea": 1.4,
        "evening_rush": 2.5,
        "night_snack": 1.5,
    }


@dataclass
class SimConfig:
    districts: int = 30
    days: int = 18
    start_date: str = "2023-10-05"
    open_hour: int = 7
    close_hour: int = 23
    base_rate: float = 1.5
    rate_spread: float = 0.3
    peak_multipliers: dict = field(default_factory=_default_peaks)
    weather_multipliers: tuple = (1.0, 1.15, 1.35, 1.7)
    weather_events_per_day: float = 0.6
    weather_span: int = 6
    rider_capacity: float = 80.0
    congestion: float = 0.1
    duration_median: float = 30.0
    duration_sigma: float = 0.25
    supply_rho: float = 0.95
    supply_sigma: float = 0.06
    cancel_base: float = 0.02
    cancel_slope: float = 0.05
    closed_prob: float = 0.02
    center_lng: float = 121.47
    center_lat: float = 31.23
    radius_km: float = 15.0
    city: str = "shanghai"
    seed: int = 42

    def validate(self):
        def positive(name):
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be > 0, got {getattr(self, name)!r}", field=f"sim.{name}")

        def nonneg(name):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)!r}", field=f"sim.{name}")

        for name in ("districts", "days", "rider_capacity", "duration_median", "duration_sigma"):
            positive(name)
        for name in ("base_rate", "rate_spread", "weather_events_per_day", "congestion",
                     "supply_sigma", "cancel_base", "cancel_slope"):
            nonneg(name)
        if not 0 <= self.open_hour < self.close_hour <= 24:
            raise ConfigError("need 0 <= open_hour < close_hour <= 24", field="sim.open_hour")
        if not 0 <= self.supply_rho < 1:
            raise ConfigError("must be in [0, 1)", field="sim.supply_rho")
        if not 0 <= self.closed_prob < 1:
            raise ConfigError("must be in [0, 1)", field="sim.closed_prob")
        if self.weather_span < 1:
            raise ConfigError("must be >= 1", field="sim.weather_span")
        if set(self.peak_multipliers) != set(PEAK_LABELS):
            raise ConfigError(f"keys must be {PEAK_LABELS}", field="sim.peak_multipliers")
        for k, v in self.peak_multipliers.items():
            if v < 0:
                raise ConfigError(f"multiplier for {k} must be >= 0", field="sim.peak_multipliers")
        if len(self.weather_multipliers) != 4 or min(self.weather_multipliers) <= 0:
            raise ConfigError("need 4 positive values", field="sim.weather_multipliers")
        try:
            self.start_epoch
        except ValueError as exc:
            raise ConfigError(str(exc), field="sim.start_date") from None
        return self

    @property
    def start_epoch(self):
        d = datetime.strptime(self.start_date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        return _calendar.timegm(d.timetuple())

    @property
    def end_epoch(self):
        """End of the last simulated day (before the drain period)."""
        return self.start_epoch + self.days * 86400


# ------------------------------------------------------------------ calendar

def peak_label_of_minute(minute_of_day):
    """Peak label index (0 = off-peak) for a minute of day in [0, 1440)."""
    for idx, name in enumerate(PEAK_LABELS[1:], start=1):
        lo, hi = PEAK_WINDOWS[name]
        if lo <= minute_of_day < hi:
            return idx
    return 0


PEAK_BY_MINUTE = np.array([peak_label_of_minute(m) for m in range(MINUTES_PER_DAY)], dtype=np.int64)


@dataclass(frozen=True)
class WeatherEvent:
    start: int
    end: int
    level: int
    district_ids: tuple


class RegimeCalendar:
    """Peak labels by minute of day and weather levels by (district, time)."""

    def __init__(self, start_epoch, days, weather_events=()):
        self.start_epoch = int(start_epoch)
        self.days = int(days)
        self.weather_events = list(weather_events)
        self._grid = {}

    def peak_label(self, t):
        return int(PEAK_BY_MINUTE[(int(t) // 60) % MINUTES_PER_DAY])

    def weather_level(self, district_id, t):
        level = 0
        for ev in self.weather_events:
            if ev.start <= t < ev.end and district_id in ev.district_ids:
                level = max(level, ev.level)
        return level

    def weather_grid(self, district_id):
        """Per-minute weather level over the simulated horizon plus drain."""
        if district_id not in self._grid:
            n = self.days * MINUTES_PER_DAY + DRAIN_SECONDS // 60
            grid = np.zeros(n, dtype=np.int64)
            for ev in self.weather_events:
                if district_id in ev.district_ids:
                    lo = max((ev.start - self.start_epoch) // 60, 0)
                    hi = min(-(-(ev.end - self.start_epoch) // 60), n)
                    np.maximum(grid[lo:hi], ev.level, out=grid[lo:hi])
            self._grid[district_id] = grid
        return self._grid[district_id]

    def weather_levels_at(self, district_ids, times):
        """Vectorized weather lookup (minute resolution)."""
        out = np.zeros(len(times), dtype=np.int64)
        idx = (np.asarray(times) - self.start_epoch) // 60
        district_ids = np.asarray(district_ids)
        for did in np.unique(district_ids):
            sel = district_ids == did
            grid = self.weather_grid(int(did))
            i = idx[sel]
            ok = (i >= 0) & (i < len(grid))
            vals = np.zeros(len(i), dtype=np.int64)
            vals[ok] = grid[i[ok]]
            out[sel] = vals
        return out

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(f"# start_epoch={self.start_epoch} days={self.days}\n")
            for ev in self.weather_events:
                ids = ",".join(str(d) for d in ev.district_ids)
                fh.write(f"{ev.start}|{ev.end}|{ev.level}|{ids}\n")

    @classmethod
    def read(cls, path):
        events, start, days = [], None, None
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    kv = dict(part.split("=", 1) for part in line[1:].split())
                    start, days = int(kv["start_epoch"]), int(kv["days"])
                    continue
                try:
                    s, e, lvl, ids = line.split("|")
                    events.append(WeatherEvent(int(s), int(e), int(lvl), tuple(int(x) for x in ids.split(","))))
                except ValueError as exc:
                    raise ParseError(f"bad weather record: {exc}", line=lineno) from None
        if start is None:
            raise ParseError("missing '# start_epoch=... days=...' header", line=1)
        return cls(start, days, events)


# ------------------------------------------------------------------- events

@dataclass(frozen=True)
class OrderEvent:
    order_id: int
    district_id: int
    created_at: int
    accepted_at: int = None
    arrived_store_at: int = None
    picked_up_at: int = None
    delivered_at: int = None
    canceled_at: int = None

    @property
    def duration_minutes(self):
        if self.delivered_at is None:
            return None
        return (self.delivered_at - self.created_at) / 60.0


class EventLog:
    """Columnar order log ordered by ``created_at``; absent timestamps are ``MISSING``."""

    def __init__(self, columns):
        n = len(columns["order_id"])
        self.columns = {}
        for name in EVENT_FIELDS:
            col = np.asarray(columns[name], dtype=np.int64)
            if col.shape != (n,):
                raise ValueError(f"column {name} has shape {col.shape}, expected ({n},)")
            self.columns[name] = col

    def __getattr__(self, name):
        try:
            return self.__dict__["columns"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __len__(self):
        return len(self.columns["order_id"])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventLog({k: v[i] for k, v in self.columns.items()})
        vals = [int(self.columns[k][i]) for k in EVENT_FIELDS]
        vals = vals[:3] + [None if v == MISSING else v for v in vals[3:]]
        return OrderEvent(*vals)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        return isinstance(other, EventLog) and all(
            np.array_equal(self.columns[k], other.columns[k]) for k in EVENT_FIELDS
        )

    def select(self, mask):
        return EventLog({k: v[mask] for k, v in self.columns.items()})

    def for_district(self, district_id):
        return self.select(self.columns["district_id"] == district_id)

    @classmethod
    def from_events(cls, events):
        cols = {k: [] for k in EVENT_FIELDS}
        for ev in events:
            for k in EVENT_FIELDS:
                v = getattr(ev, k)
                cols[k].append(MISSING if v is None else v)
        return cls({k: np.array(v, dtype=np.int64) for k, v in cols.items()})

    @classmethod
    def empty(cls):
        return cls({k: np.zeros(0, dtype=np.int64) for k in EVENT_FIELDS})

    def content_hash(self):
        h = hashlib.sha256()
        for k in EVENT_FIELDS:
            h.update(self.columns[k].tobytes())
        return h.hexdigest()


def write_events(path, log, append=False):
    """One ``|``-delimited record per line; empty fields for absent timestamps."""
    cols = [log.columns[k].tolist() for k in EVENT_FIELDS]
    lines = []
    for row in zip(*cols):
        lines.append("|".join("" if (i >= 3 and v == MISSING) else str(v) for i, v in enumerate(row)))
    with open(path, "a" if append else "w") as fh:
        if lines:
            fh.write("\n".join(lines))
            fh.write("\n")


def read_events(path):
    cols = [[] for _ in EVENT_FIELDS]
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != len(EVENT_FIELDS):
                raise ParseError(f"expected {len(EVENT_FIELDS)} fields, got {len(parts)}", line=lineno)
            try:
                for i, p in enumerate(parts):
                    if p == "":
                        if i < 3:
                            raise ValueError(f"{EVENT_FIELDS[i]} is required")
                        cols[i].append(MISSING)
                    else:
                        cols[i].append(int(p))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    return EventLog({k: np.array(c, dtype=np.int64) for k, c in zip(EVENT_FIELDS, cols)})


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- simulation

def generate_districts(config):
    """Random district centers scattered over a disk around the city center."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    r = config.radius_km * np.sqrt(rng.random(config.districts))
    theta = 2 * np.pi * rng.random(config.districts)
    dlat = r * np.sin(theta) / 111.32
    dlng = r * np.cos(theta) / (111.32 * math.cos(math.radians(config.center_lat)))
    return [
        geo.DistrictGeo(i + 1, config.center_lng + float(dlng[i]), config.center_lat + float(dlat[i]),
                        city=config.city)
        for i in range(config.districts)
    ]


def make_calendar(config, districts):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    span = min(config.weather_span, len(districts))
    neighbors = geo.nearest_neighbors(geo.project_all(districts), span)
    ids = [d.district_id for d in districts]
    open_min, close_min = config.open_hour * 60, config.close_hour * 60
    events = []
    for day in range(config.days):
        day_start = config.start_epoch + day * 86400
        for _ in range(rng.poisson(config.weather_events_per_day)):
            center = ids[rng.integers(len(ids))]
            start_min = rng.uniform(open_min, max(open_min, close_min - 60))
            length = rng.uniform(60, 240)
            level = int(rng.choice([1, 2, 3], p=[0.5, 0.3, 0.2]))
            start = day_start + int(start_min) * 60
            events.append(WeatherEvent(start, start + int(length) * 60, level, tuple(neighbors[center])))
    return RegimeCalendar(config.start_epoch, config.days, events)


def _simulate_district(config, district_id, rate_factor, cal, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n_minutes = config.days * MINUTES_PER_DAY
    minute_of_day = np.arange(n_minutes) % MINUTES_PER_DAY
    peak_mult = np.array([config.peak_multipliers[p] for p in PEAK_LABELS])
    lam = config.base_rate * rate_factor * peak_mult[PEAK_BY_MINUTE[minute_of_day]]
    open_mask = (minute_of_day >= config.open_hour * 60) & (minute_of_day < config.close_hour * 60)
    closed_days = rng.random(config.days) < config.closed_prob
    open_mask &= ~np.repeat(closed_days, MINUTES_PER_DAY)
    lam = np.where(open_mask, lam, 0.0)

    counts = rng.poisson(lam)
    minute_idx = np.repeat(np.arange(n_minutes), counts)
    n = len(minute_idx)
    created = config.start_epoch + (minute_idx + rng.random(n)) * 60.0
    order = np.argsort(created, kind="stable")
    created, minute_idx = created[order], minute_idx[order]

    # AR(1) supply factor on 10-minute blocks
    n_blocks = n_minutes // 10 + 1
    shocks = rng.normal(0.0, config.supply_sigma, n_blocks)
    log_supply = np.empty(n_blocks)
    prev = rng.normal(0.0, config.supply_sigma / math.sqrt(1 - config.supply_rho**2))
    for b in range(n_blocks):
        prev = config.supply_rho * prev + shocks[b]
        log_supply[b] = prev
    supply = np.exp(log_supply)[minute_idx // 10]

    weather = np.asarray(config.weather_multipliers)[cal.weather_grid(district_id)[minute_idx]]
    base = config.duration_median * np.exp(config.duration_sigma * rng.normal(size=n))
    stretch = base * weather * supply
    u_cancel = rng.random(n)
    u_cancel_at = rng.uniform(0.1, 0.7, n)
    fractions = np.cumsum(rng.dirichlet([1.0, 3.0, 2.0, 4.0], size=n)[:, :3], axis=1)

    capacity = config.rider_capacity * rate_factor
    duration = np.empty(n)
    canceled = np.zeros(n, dtype=bool)
    finish_at = np.empty(n)
    open_heap = []
    congestion = config.congestion
    for i in range(n):
        c = created[i]
        while open_heap and open_heap[0] <= c:
            heapq.heappop(open_heap)
        d = stretch[i] * (1.0 + congestion * len(open_heap) / capacity)
        d = min(max(d, MIN_DURATION_MIN), MAX_DURATION_MIN)
        duration[i] = d
        p = min(config.cancel_base + config.cancel_slope * max(0.0, d - 30.0) / 30.0, 0.5)
        if u_cancel[i] < p:
            canceled[i] = True
            finish = c + d * 60.0 * u_cancel_at[i]
        else:
            finish = c + d * 60.0
        finish_at[i] = finish
        heapq.heappush(open_heap, finish)

    dur_s = duration * 60.0
    stages = created[:, None] + fractions * dur_s[:, None]
    stage_cols = []
    for j in range(3):
        col = np.floor(stages[:, j]).astype(np.int64)
        dropped = canceled & (stages[:, j] >= finish_at)
        stage_cols.append(np.where(dropped, MISSING, col))
    delivered = np.where(canceled, MISSING, np.floor(created + dur_s).astype(np.int64))
    cancel_col = np.where(canceled, np.floor(finish_at).astype(np.int64), MISSING)
    return {
        "district_id": np.full(n, district_id, dtype=np.int64),
        "created_at": np.floor(created).astype(np.int64),
        "accepted_at": stage_cols[0],
        "arrived_store_at": stage_cols[1],
        "picked_up_at": stage_cols[2],
        "delivered_at": delivered,
        "canceled_at": cancel_col,
    }


def simulate(config, districts, calendar=None):
    """Generate the full event log; returns ``(EventLog, RegimeCalendar)``."""
    config.validate()
    if not districts:
        raise ConfigError("district list is empty", field="sim.districts")
    cal = calendar if calendar is not None else make_calendar(config, districts)
    root = np.random.SeedSequence([config.seed, 3])
    children = root.spawn(len(districts))
    factor_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))
    factors = np.exp(config.rate_spread * factor_rng.normal(size=len(districts)))
    parts = [
        _simulate_district(config, d.district_id, float(factors[i]), cal, children[i])
        for i, d in enumerate(districts)
    ]
    cols = {k: np.concatenate([p[k] for p in parts]) for k in TIMESTAMP_FIELDS + ("district_id",)}
    order = np.lexsort((cols["district_id"], cols["created_at"]))
    cols = {k: v[order] for k, v in cols.items()}
    cols["order_id"] = np.arange(1, len(order) + 1, dtype=np.int64)
    return EventLog(cols), cal


def config_dict(config):
    d = asdict(config)
    d["weather_multipliers"] = list(config.weather_multipliers)
    return d
