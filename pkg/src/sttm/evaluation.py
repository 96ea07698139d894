"""Metrics, ablation matrix and one-parameter sweeps.

Every arm retrains from scratch under the same seed and data; only the
named component or hyperparameter changes.
"""

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, TrainingAborted
from .model import ABLATION_TITLES, ABLATIONS, STTM

ANOMALY_THRESHOLD = 40.0
REPORT_COLUMNS = ("variant", "mae", "mse", "amae", "n_samples", "n_anomaly")
SWEEP_PARAMS = ("n", "m", "l_mem")
DEFAULT_GRIDS = {"n": (1, 2, 3, 4, 5, 6), "m": (1, 2, 3, 4, 5, 6), "l_mem": (8, 10, 12, 14, 16, 18)}


def metrics(labels, predictions, threshold=ANOMALY_THRESHOLD):
    """(mae, mse, amae, n_anomaly); amae is None when no label reaches ``threshold``."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if y.shape != p.shape:
        raise ContractError(f"labels {y.shape} and predictions {p.shape} differ in shape")
    if y.size == 0:
        raise ContractError("cannot evaluate an empty split")
    err = np.abs(p - y)
    anomalous = y >= threshold
    n_anom = int(anomalous.sum())
    amae = float(err[anomalous].mean()) if n_anom else None
    return float(err.mean()), float(np.mean((p - y) ** 2)), amae, n_anom


@dataclass
class MetricsReport:
    split: str
    n_samples: int
    n_anomaly: int
    mae: float
    mse: float
    amae: float = None
    config_fingerprint: str = ""
    checkpoint_fingerprint: str = ""
    data_fingerprint: str = ""
    variant: str = "full"

    @property
    def fingerprint(self):
        key = f"{self.config_fingerprint}|{self.checkpoint_fingerprint}|{self.data_fingerprint}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def row(self):
        d = asdict(self)
        d["fingerprint"] = self.fingerprint
        return d

    def summary(self):
        amae = "absent" if self.amae is None else f"{self.amae:.4f}"
        return (f"{self.split}: n={self.n_samples} n_anomaly={self.n_anomaly} "
                f"MAE={self.mae:.4f} MSE={self.mse:.4f} AMAE={amae}")


def evaluate(model, split, split_name="test", threshold=ANOMALY_THRESHOLD, batch_size=1024):
    if len(split) == 0:
        raise ContractError(f"{split_name} split is empty")
    pred = model.predict_dataset(split, batch_size=batch_size)
    mae, mse, amae, n_anom = metrics(split.labels, pred, threshold)
    return MetricsReport(split_name, len(split), n_anom, mae, mse, amae,
                         model.config.fingerprint(), model.fingerprint(), split.fingerprint())


def historical_mean_baseline(train, test, threshold=ANOMALY_THRESHOLD):
    """Predict each district's mean training label (global mean for unseen districts)."""
    global_mean = float(train.labels.mean())
    means = {}
    for d in np.unique(train.district_ids):
        means[int(d)] = float(train.labels[train.district_ids == d].mean())
    pred = np.array([means.get(int(d), global_mean) for d in test.district_ids])
    mae, mse, amae, n_anom = metrics(test.labels, pred, threshold)
    return MetricsReport("test", len(test), n_anom, mae, mse, amae,
                         "historical_mean", "", test.fingerprint(), variant="historical_mean")


# ------------------------------------------------------------------ arms

@dataclass
class ArmResult:
    variant: str
    seed: int
    report: MetricsReport = None
    n_params: int = 0
    error: str = ""
    value: object = None

    def row(self):
        r = self.report
        d = {
            "variant": self.variant,
            "mae": None if r is None else r.mae,
            "mse": None if r is None else r.mse,
            "amae": None if r is None else r.amae,
            "n_samples": None if r is None else r.n_samples,
            "n_anomaly": None if r is None else r.n_anomaly,
            "seed": self.seed,
            "value": self.value,
            "n_params": self.n_params,
            "config_fingerprint": "" if r is None else r.config_fingerprint,
            "checkpoint_fingerprint": "" if r is None else r.checkpoint_fingerprint,
            "error": self.error,
        }
        return d


def _train_arm(config, train, val, test, train_config, seed, threshold, name, value=None):
    from .training import train as fit

    model = STTM(config, seed=seed)
    n_params = model.num_params()
    try:
        result = fit(model, train, val, replace(train_config, seed=seed), threshold=threshold)
    except TrainingAborted as e:
        return ArmResult(name, seed, None, n_params, f"aborted: {e}", value)
    report = evaluate(result.model, test, "test", threshold)
    report.variant = name
    return ArmResult(name, seed, report, n_params, "", value)


def _run_arms(jobs, specs):
    if jobs <= 1 or len(specs) <= 1:
        return [_train_arm(*s) for s in specs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_train_arm, *s) for s in specs]
        return [f.result() for f in futures]


def run_ablation(data, base_config, train_config, seeds=(0,), variants=None,
                 threshold=ANOMALY_THRESHOLD, jobs=1):
    """Full model plus each single-component removal, for every seed."""
    variants = list(variants or ABLATIONS)
    specs = [(base_config.variant(v), data.train, data.validation, data.test, train_config, s,
              threshold, v) for s in seeds for v in variants]
    return _run_arms(jobs, specs)


def run_sweep(data, base_config, train_config, param, values=None, seed=0,
              threshold=ANOMALY_THRESHOLD, jobs=1):
    """Retrain from scratch per value; N and M sweeps truncate the prepared windows."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}",
                          field="sweep.param")
    values = list(DEFAULT_GRIDS[param] if values is None else values)
    if not values:
        raise ConfigError("empty sweep grid", field="sweep.values")
    specs = []
    for v in values:
        v = int(v)
        if v < 1:
            raise ConfigError(f"sweep value must be positive, got {v}", field="sweep.values")
        splits = (data.train, data.validation, data.test)
        if param in ("n", "m"):
            available = data.train.n if param == "n" else data.train.m
            if v > available:
                raise ConfigError(f"{param}={v} exceeds the prepared {param}={available}",
                                  field="sweep.values")
            splits = tuple(s.truncate(**{param: v}) for s in splits)
        config = replace(base_config, **{param: v})
        specs.append((config, *splits, train_config, seed, threshold, f"{param}={v}", v))
    return _run_arms(jobs, specs)


def median_by_variant(results, metric):
    """Median of ``metric`` per variant over seeds, skipping failed arms."""
    out = {}
    for r in results:
        if r.report is None or getattr(r.report, metric) is None:
            continue
        out.setdefault(r.variant, []).append(getattr(r.report, metric))
    return {k: float(np.median(v)) for k, v in out.items()}


# ------------------------------------------------------------------ reports

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_table(results):
    rows = [r.row() for r in results]
    extra = [k for k in rows[0] if k not in REPORT_COLUMNS] if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(REPORT_COLUMNS) + extra)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in list(REPORT_COLUMNS) + extra])
    return buf.getvalue()


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_reports(results, csv_path, jsonl_path):
    _atomic_write(csv_path, report_table(results))
    lines = [json.dumps(r.row(), sort_keys=False) for r in results]
    _atomic_write(jsonl_path, "".join(line + "\n" for line in lines))


def format_ablation(results):
    """Human-readable table, one line per arm; AMAE is an extra column."""
    lines = [f"{'variant':34s} {'seed':>4s} {'MAE':>9s} {'MSE':>10s} {'AMAE':>9s}"]
    for r in results:
        title = ABLATION_TITLES.get(r.variant, r.variant)
        if r.report is None:
            lines.append(f"{title:34s} {r.seed:4d}  FAILED {r.error}")
            continue
        amae = "-" if r.report.amae is None else f"{r.report.amae:9.4f}"
        lines.append(f"{title:34s} {r.seed:4d} {r.report.mae:9.4f} {r.report.mse:10.4f} {amae:>9s}")
    return "\n".join(lines)

