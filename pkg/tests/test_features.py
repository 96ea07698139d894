import numpy as np
import pytest

from sttm import features as F
from sttm import geo
from sttm import simulator as sim
from sttm.errors import CompatibilityError, ConfigError, ContractError

MISSING = sim.MISSING
T0 = 1_700_000_000


def random_log(n, seed, district_id=1, span=3 * 3600):
    """Orders with random lifecycles; stages are monotone, outcomes exclusive."""
    rng = np.random.default_rng(seed)
    created = np.sort(T0 + rng.integers(0, span, n))
    cols = {k: np.full(n, MISSING, dtype=np.int64) for k in sim.EVENT_FIELDS}
    cols["order_id"] = np.arange(1, n + 1)
    cols["district_id"][:] = district_id
    cols["created_at"] = created
    for i in range(n):
        t = created[i]
        steps = np.cumsum(rng.integers(0, 20 * 60, 4))
        cancel_at = t + rng.integers(0, 90 * 60) if rng.random() < 0.2 else None
        for j, k in enumerate(("accepted_at", "arrived_store_at", "picked_up_at", "delivered_at")):
            ts = t + steps[j]
            if cancel_at is not None and ts >= cancel_at:
                break
            cols[k][i] = ts
        if cancel_at is not None and cols["delivered_at"][i] == MISSING:
            cols["canceled_at"][i] = cancel_at
    return sim.EventLog(cols)


def brute_features(events, T, on_time=40):
    """Direct recount over OrderEvent objects, one feature at a time."""

    def done(ts):
        return ts is not None and ts <= T

    def rate(num, den):
        return num / den if den else -1.0

    out = []
    recent = [e for e in events if T - 3600 < e.created_at <= T]
    for stage in ("arrived_store_at", "picked_up_at", "accepted_at"):
        for k in (0, 8, 15):
            out.append(sum(1 for e in recent if not done(e.canceled_at)
                           and not done(getattr(e, stage)) and T - e.created_at > k * 60))
    for w in (10, 30, 60):
        out.append(sum(1 for e in events if T - w * 60 < e.created_at <= T
                       and not done(e.delivered_at) and not done(e.canceled_at)))
    for w in (10, 30, 45, 60):
        out.append(sum(1 for e in events if e.delivered_at is not None and T - w * 60 < e.delivered_at <= T))
    for w in (5, 10):
        out.append(sum(1 for e in events if e.canceled_at is not None and T - w * 60 < e.canceled_at <= T))
    for w in (3, 5, 10, 15, 30):
        made = [e for e in events if T - w * 60 < e.created_at <= T]
        out.append(rate(sum(1 for e in made if done(e.accepted_at)), len(made)))
    for w in (30, 60):
        made = [e for e in events if T - w * 60 < e.created_at <= T]
        out.append(rate(sum(1 for e in made if done(e.delivered_at)), len(made)))
    for w in (10, 30, 45, 60):
        dl = [e for e in events if e.delivered_at is not None and T - w * 60 < e.delivered_at <= T]
        out.append(rate(sum(1 for e in dl if e.delivered_at - e.created_at <= on_time * 60), len(dl)))
    for w in (30, 60):
        dl = [e for e in events if e.delivered_at is not None and T - w * 60 < e.delivered_at <= T]
        out.append(rate(sum((e.delivered_at - e.created_at) / 60 for e in dl), len(dl)))
    return np.array(out, dtype=float)


COUNT_COLS = [i for i in range(F.D_A) if i not in F.RATE_FEATURES]


GOLDEN_NAMES = (
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


def test_feature_list_golden():
    assert F.D_A == 31
    assert len(set(F.FEATURE_NAMES)) == 31
    groups = [3, 3, 3, 3, 4, 2, 5, 2, 4, 2]
    assert sum(groups) == 31
    assert F.FEATURE_NAMES[0] == "not_arrived_store_gt0_1h"
    assert F.FEATURE_NAMES[8] == "not_accepted_gt15_1h"
    assert F.FEATURE_NAMES[-1] == "avg_delivery_minutes_60m"
    assert F.FEATURE_NAMES == GOLDEN_NAMES
    assert F.feature_order_hash() == "23227b57e3367494"
    assert len(F.RATE_FEATURES) == 13


def test_empty_window():
    v = F.aggregate_district(sim.EventLog.empty(), [T0], 40)[0]
    assert np.all(v[COUNT_COLS] == 0)
    assert np.all(v[list(F.RATE_FEATURES)] == -1)


def test_single_unaccepted_order():
    log = sim.EventLog.from_events([sim.OrderEvent(1, 1, T0 - 20 * 60)])
    v = F.aggregate_slice(log, 1, T0).values
    idx = [F.FEATURE_NAMES.index(f"not_accepted_gt{k}_1h") for k in (0, 8, 15)]
    assert list(v[idx]) == [1, 1, 1]


def test_aggregation_matches_bruteforce_oracle():
    log = random_log(1200, seed=5)
    events = list(log)
    ends = T0 + np.arange(0, 4 * 3600, 7 * 60 + 13)
    fast = F.aggregate_district(log, ends, 40)
    for s, T in enumerate(ends):
        ref = brute_features(events, int(T))
        assert np.array_equal(fast[s, COUNT_COLS], ref[COUNT_COLS]), T
        np.testing.assert_allclose(fast[s], ref, rtol=0, atol=1e-9)


def test_aggregation_matches_oracle_on_simulated_log():
    cfg = sim.SimConfig(districts=3, days=1, seed=2)
    log, _ = sim.simulate(cfg, sim.generate_districts(cfg))
    sub = log.for_district(2)
    assert len(sub) >= 1000
    events = list(sub)
    ends = cfg.start_epoch + np.arange(8 * 3600, 23 * 3600, 3600 + 17 * 60)
    fast = F.aggregate_district(sub, ends, 40)
    for s, T in enumerate(ends):
        ref = brute_features(events, int(T))
        assert np.array_equal(fast[s, COUNT_COLS], ref[COUNT_COLS])
        np.testing.assert_allclose(fast[s], ref, rtol=0, atol=1e-9)


def test_rates_in_unit_interval():
    log = random_log(800, seed=9)
    fast = F.aggregate_district(log, T0 + np.arange(600, 3 * 3600, 300), 40)
    rates = fast[:, list(F.RATE_FEATURES[:-2])]
    assert np.all((rates == -1) | ((rates >= 0) & (rates <= 1)))
    assert np.all(fast[:, COUNT_COLS] >= 0)


def _mutate_future(log, T, rng):
    """Change everything the features at ``T`` must not see."""
    cols = {k: v.copy() for k, v in log.columns.items()}
    future = cols["created_at"] > T
    cols["created_at"][future] += rng.integers(1, 3000, future.sum())
    for k in sim.TIMESTAMP_FIELDS[1:]:
        col = cols[k]
        late = (col != MISSING) & (col > T)
        col[late] += rng.integers(1, 5000, late.sum())
        # drop some future timestamps entirely
        col[late & (rng.random(len(col)) < 0.3)] = MISSING
    # brand-new orders after T
    extra = 50
    for k in cols:
        add = np.full(extra, MISSING, dtype=np.int64)
        if k == "order_id":
            add = cols[k].max() + 1 + np.arange(extra)
        elif k == "district_id":
            add[:] = 1
        elif k == "created_at":
            add = T + 1 + rng.integers(0, 3600, extra)
        elif k == "delivered_at":
            add = T + 4000 + rng.integers(0, 3600, extra)
        cols[k] = np.concatenate([cols[k], add])
    order = np.argsort(cols["created_at"], kind="stable")
    return sim.EventLog({k: v[order] for k, v in cols.items()})


def test_causality_mutation():
    rng = np.random.default_rng(0)
    log = random_log(1500, seed=12, span=4 * 3600)
    for T in T0 + np.array([3600, 5400, 7777, 10800]):
        base = F.aggregate_district(log, [T], 40)
        for _ in range(5):
            mutated = _mutate_future(log, int(T), rng)
            assert np.array_equal(F.aggregate_district(mutated, [T], 40), base)


def test_label_examples():
    log = sim.EventLog.from_events([
        sim.OrderEvent(1, 1, T0 + 10, delivered_at=T0 + 10 + 20 * 60),
        sim.OrderEvent(2, 1, T0 + 100, delivered_at=T0 + 100 + 40 * 60),
        sim.OrderEvent(3, 1, T0 + 120, canceled_at=T0 + 500),
        sim.OrderEvent(4, 1, T0 + 301, delivered_at=T0 + 9999),
    ])
    assert F.compute_label(log, 1, T0) == pytest.approx(30.0)
    assert F.compute_label(log, 1, T0 + 2000) is None


def test_label_matches_bruteforce():
    log = random_log(900, seed=3)
    events = list(log)
    for T in T0 + np.arange(0, 3 * 3600, 311):
        durs = [(e.delivered_at - e.created_at) / 60 for e in events
                if T < e.created_at <= T + 300 and e.delivered_at is not None]
        got = F.compute_label(log, 1, int(T))
        if not durs:
            assert got is None
        else:
            assert got == pytest.approx(np.mean(durs), abs=1e-9)


def test_minute_and_weekday():
    midnight = 1696464000  # 2023-10-05 00:00 UTC, a Thursday
    assert F.minute_id(midnight) == 1440
    assert F.minute_id(midnight + 60) == 1
    assert F.minute_id(midnight - 60) == 1439
    assert F.day_of_week(midnight) == 4


def test_build_sensitive_tuesday_lunch():
    tuesday = 1696291200  # 2023-10-03 00:00 UTC
    t = tuesday + 12 * 3600 + 15 * 60
    cal = sim.RegimeCalendar(tuesday, 1)
    d = geo.DistrictGeo(5, 121.0, 31.0, city="sh")
    vocab = F.SensitiveVocab.fit(["sh"], [5])
    ids = F.build_sensitive(d, t, cal, vocab)
    assert ids == (1, 1, 735, sim.PEAK_LABELS.index("morning_rush"), 2, 0)
    unseen = geo.DistrictGeo(99, 121.0, 31.0, city="bj")
    assert F.build_sensitive(unseen, t, cal, vocab)[:2] == (0, 0)


def test_normalization_properties():
    rng = np.random.default_rng(0)
    vals = rng.normal(5, 3, (500, F.D_A))
    vals[rng.random(vals.shape) < 0.1] = -1.0
    vals[:, 3] = 7.0  # constant
    stats = F.fit_stats(vals)
    z = F.normalize_values(vals, stats)
    assert np.all(z[vals == -1] == -1)
    assert np.all(z[:, 3][vals[:, 3] != -1] == 0)
    for j in range(F.D_A):
        if j == 3:
            continue
        keep = vals[:, j] != -1
        assert z[keep, j].mean() == pytest.approx(0, abs=1e-9)
        assert z[keep, j].std() == pytest.approx(1, abs=1e-9)
    back = F.denormalize_values(z, stats)
    np.testing.assert_allclose(back, vals, atol=1e-9)
    assert stats.constant[3]
    again = F.NormalizationStats.from_json(stats.to_json())
    assert again.hash() == stats.hash()


def test_normalization_empty():
    with pytest.raises(ContractError):
        F.fit_stats(np.zeros((0, F.D_A)))


@pytest.fixture(scope="module")
def prepared():
    cfg = sim.SimConfig(districts=8, days=5, seed=4)
    districts = sim.generate_districts(cfg)
    log, cal = sim.simulate(cfg, districts)
    fc = F.FeatureConfig(split_days=(3, 1, 1))
    data = F.prepare(log, districts, cal, cfg, 4, 3, 10, 10, fc)
    return cfg, districts, log, cal, fc, data


def test_split_is_chronological_partition(prepared):
    cfg, _, _, _, _, data = prepared
    tr, va, te = data.train, data.validation, data.test
    assert tr.sample_times.max() < va.sample_times.min()
    assert va.sample_times.max() < te.sample_times.min()
    day = 86400
    assert tr.sample_times.max() < cfg.start_epoch + 3 * day <= va.sample_times.min()


def test_split_union(prepared):
    cfg, districts, log, cal, fc, data = prepared
    scaled, ctx = geo.build_contexts(districts, 4, 10, 10)
    ticks = F.schedule_ticks(cfg.start_epoch, cfg.days, cfg.open_hour, cfg.close_hour, fc)
    full = F.assemble_samples(log, scaled, ctx, cal, ticks, 4, 3, fc)
    keys = lambda ds: set(zip(ds.district_ids.tolist(), ds.sample_times.tolist()))
    parts = [keys(d) for d in (data.train, data.validation, data.test)]
    assert set.union(*parts) == keys(full)
    assert sum(len(p) for p in parts) == len(full)


def test_sample_count_matches_enumeration(prepared):
    cfg, districts, log, cal, fc, data = prepared
    ticks = F.schedule_ticks(cfg.start_epoch, cfg.days, cfg.open_hour, cfg.close_hour, fc)
    expected = 0
    for d in districts:
        created = log.created_at[(log.district_id == d.district_id) & (log.delivered_at != MISSING)]
        for t in ticks:
            expected += bool(np.any((created > t) & (created <= t + 300)))
    assert len(data.train) + len(data.validation) + len(data.test) == expected


def test_x_a_is_exact_gather(prepared):
    _, _, log, _, fc, data = prepared
    ds = data.test
    rng = np.random.default_rng(1)
    for i in rng.choice(len(ds), 10, replace=False):
        s = ds.sample(i, normalized=False)
        for j, nid in enumerate(ds.neighbor_ids[i]):
            for k in range(ds.n):
                T = s.sample_time - (ds.n - 1 - k) * 600
                row = s.x_a[j, k]
                if ds.slice_index[i, j, k] < 0:
                    assert np.all(row == -1)
                else:
                    ref = F.aggregate_slice(log, int(nid), T, fc.on_time_minutes).values
                    np.testing.assert_array_equal(row, ref)
        assert s.label == pytest.approx(F.compute_label(log, s.district_id, s.sample_time), abs=1e-12)


def test_sensitive_ranges(prepared):
    *_, data = prepared
    sizes = data.vocab.sizes()
    for ds in (data.train, data.validation, data.test):
        xb = ds.x_b
        assert np.all(xb >= 0) and np.all(xb < np.array(sizes))
        assert xb[:, 2].min() >= 1 and xb[:, 2].max() <= 1440
        assert set(np.unique(xb[:, 4])) <= set(range(1, 8))


def test_normalized_train_moments(prepared):
    *_, data = prepared
    x = data.train.x_a().reshape(-1, F.D_A)
    for j in range(F.D_A):
        col = x[:, j]
        keep = col != -1
        if data.stats.constant[j] or keep.sum() < 2:
            continue
        # stats exclude sentinels; z == -1 coincidences are negligible here
        assert abs(col[keep].mean()) < 0.05


def test_stats_not_refit_on_test(prepared):
    *_, data = prepared
    assert data.test.stats.hash() == data.train.stats.hash() == data.stats.hash()


def test_missing_district_rows():
    cfg = sim.SimConfig(districts=5, days=2, seed=6)
    districts = sim.generate_districts(cfg)
    log, cal = sim.simulate(cfg, districts)
    silent = districts[2].district_id
    log = log.select(log.district_id != silent)
    fc = F.FeatureConfig(split_days=(1, 1, 1))
    scaled, ctx = geo.build_contexts(districts, 5, 10, 10)
    ticks = F.schedule_ticks(cfg.start_epoch, 2, cfg.open_hour, cfg.close_hour, fc)
    ds = F.assemble_samples(log, scaled, ctx, cal, ticks, 5, 3, fc)
    assert silent not in set(ds.district_ids.tolist())
    pos = ds.neighbor_ids == silent
    assert pos.any()
    x = ds.x_a(normalized=False)
    assert np.all(x[pos] == -1)


def test_m1_center_only(prepared):
    *_, data = prepared
    t = data.train.truncate(m=1)
    assert t.x_a().shape[1:] == (1, data.train.n, F.D_A)
    assert np.all(t.neighbor_ids[:, 0] == t.district_ids)


def test_schedule_outside_horizon():
    cfg = sim.SimConfig(districts=3, days=1)
    districts = sim.generate_districts(cfg)
    scaled, ctx = geo.build_contexts(districts, 2, 10, 10)
    with pytest.raises(ConfigError):
        F.assemble_samples(sim.EventLog.empty(), scaled, ctx, sim.RegimeCalendar(cfg.start_epoch, 1),
                           [cfg.start_epoch - 600], 2, 2, horizon=(cfg.start_epoch, cfg.end_epoch))


def test_empty_split_errors(prepared):
    *_, data = prepared
    with pytest.raises(ConfigError):
        F.split_dataset(data.train, (0, 1))


def test_dataset_roundtrip(tmp_path, prepared):
    *_, data = prepared
    p = tmp_path / "ds.npz"
    data.test.save(p)
    back = F.Dataset.load(p, stats=data.stats)
    assert back.fingerprint() == data.test.fingerprint()
    np.testing.assert_array_equal(back.x_a(), data.test.x_a())
    other = F.NormalizationStats(data.stats.mean + 1, data.stats.std, data.stats.constant)
    with pytest.raises(CompatibilityError):
        F.Dataset.load(p, stats=other)


def test_prepare_is_deterministic(prepared):
    cfg, districts, log, cal, fc, data = prepared
    again = F.prepare(log, districts, cal, cfg, 4, 3, 10, 10, fc)
    for a, b in zip((data.train, data.validation, data.test), (again.train, again.validation, again.test)):
        assert a.fingerprint() == b.fingerprint()
