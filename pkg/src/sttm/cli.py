"""Command-line pipeline: simulate -> featurize -> train -> evaluate / ablate / sweep.

Each stage reads and writes files under ``--workdir`` and records the hashes of
its inputs, so later stages can refuse artifacts that were built from
something else.

Config files are plain ``section.key = value`` lines (``#`` starts a comment).
Values are JSON literals; bare words are accepted for string fields.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import evaluation as ev
from . import features as F
from . import geo
from . import simulator as sim
from .errors import (CompatibilityError, ConfigError, ContractError, DomainError, ParseError,
                     SttmError)
from .features import FeatureConfig
from .model import ABLATIONS, STTM, SttmConfig, load_checkpoint, read_checkpoint_header
from .simulator import SimConfig
from .training import TrainConfig, train

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, ParseError, CompatibilityError, DomainError, ContractError,
               FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError)
SPLITS = ("train", "validation", "test")
DERIVED_MODEL_KEYS = ("vocab_sizes", "d_a", "d_b")


@dataclass
class EvalConfig:
    threshold: float = ev.ANOMALY_THRESHOLD
    seeds: tuple = (0, 1, 2)
    variants: tuple = tuple(ABLATIONS)
    sweep_values: tuple = ()  # empty means the parameter's default grid


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: SttmConfig = field(default_factory=SttmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0  # model init and training order; the simulator has its own sim.seed

    def to_dict(self):
        return {
            "seed": self.seed,
            "sim": sim.config_dict(self.sim),
            "features": F.config_dict(self.features),
            "model": self.model.to_dict(),
            "train": dict(vars(self.train)),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.eval).items()},
        }


# ------------------------------------------------------------------ config

def _coerce(value, default, where):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str) or default is None:
        if isinstance(value, str):
            return value
        if default is None and value is None:
            return None
    elif isinstance(default, tuple):
        if isinstance(value, list):
            return tuple(value)
    elif isinstance(default, dict):
        if isinstance(value, dict):
            return value
    raise ConfigError(f"expected {type(default).__name__}, got {value!r}", field=where)


def parse_config_text(text, source="<config>"):
    """``{section: {key: raw value}}`` plus top-level keys under section ``""``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ParseError(f"{source}: empty key or value", line=lineno)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value  # bare word; only string fields will accept it
        section, _, name = key.rpartition(".")
        if "." in section:
            raise ParseError(f"{source}: nested section {section!r} not supported", line=lineno)
        bucket = out.setdefault(section, {})
        if name in bucket:
            raise ParseError(f"{source}: duplicate key {key!r}", line=lineno)
        bucket[name] = (parsed, lineno)
    return out


def build_run_config(parsed, source="<config>"):
    cfg = RunConfig()
    sections = {f.name for f in fields(RunConfig) if f.name != "seed"}
    for section, items in parsed.items():
        if section == "":
            for key, (value, lineno) in items.items():
                if key != "seed":
                    raise ParseError(f"{source}: unknown key {key!r}", line=lineno)
                cfg.seed = _coerce(value, 0, "seed")
            continue
        if section not in sections:
            line = min(lineno for _, lineno in items.values())
            raise ParseError(f"{source}: unknown section {section!r}", line=line)
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        updates = {}
        for key, (value, lineno) in items.items():
            where = f"{section}.{key}"
            if key not in known:
                raise ParseError(f"{source}: unknown key {where!r}", line=lineno)
            if section == "model" and key in DERIVED_MODEL_KEYS:
                raise ParseError(f"{source}: {where} is derived from the dataset", line=lineno)
            try:
                updates[key] = _coerce(value, getattr(current, key), where)
            except ConfigError as e:
                raise ParseError(f"{source}: {e}", line=lineno) from None
        setattr(cfg, section, replace(current, **updates))
    cfg.sim.validate()
    cfg.features.validate()
    cfg.model.validate()
    cfg.train.validate()
    for v in cfg.eval.variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown variant {v!r}", field="eval.variants")
    return cfg


def load_run_config(path):
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return build_run_config(parse_config_text(fh.read(), path), path)


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ------------------------------------------------------------------ commands

def cmd_simulate(args, cfg):
    if args.seed is not None:
        cfg.sim = replace(cfg.sim, seed=args.seed)
    districts = sim.generate_districts(cfg.sim)
    log, calendar = sim.simulate(cfg.sim, districts)
    out = args.out
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    sim.write_events(out, log)
    calendar.write(out + ".weather")
    districts_path = args.districts_out or out + ".districts.csv"
    geo.write_districts(districts_path, districts)
    _write_json(out + ".config.json", {
        "config": cfg.to_dict(),
        "events_hash": sim.file_hash(out),
        "weather_hash": sim.file_hash(out + ".weather"),
        "districts_hash": sim.file_hash(districts_path),
        "districts_path": os.path.relpath(districts_path, os.path.dirname(os.path.abspath(out))),
    })
    print(f"events={len(log)} districts={len(districts)} hash={sim.file_hash(out)[:16]}")
    return EXIT_OK


def check_drain(log):
    """Every order must have a terminal outcome; otherwise labels would be incomplete."""
    open_orders = (log.delivered_at == sim.MISSING) & (log.canceled_at == sim.MISSING)
    if open_orders.any():
        first = int(log.order_id[np.argmax(open_orders)])
        raise DomainError(f"{int(open_orders.sum())} orders have no outcome (first order_id={first}); "
                          "the event log lacks a drain period")


def _events_sidecar(events_path):
    path = events_path + ".config.json"
    if not os.path.exists(path):
        raise CompatibilityError(f"{path} missing; event logs must come from `simulate`")
    side = _read_json(path)
    if sim.file_hash(events_path) != side["events_hash"]:
        raise CompatibilityError(f"{events_path} does not match the hash recorded in {path}")
    return side


def dataset_summary(parts, districts):
    lines = [f"{'split':12s} {'samples':>9s} {'districts':>10s}  {'first tick (UTC)':20s} {'last tick (UTC)':20s}"]
    for name, ds in zip(SPLITS, parts):
        t0 = time.strftime("%Y-%m-%d %H:%M", time.gmtime(int(ds.sample_times.min())))
        t1 = time.strftime("%Y-%m-%d %H:%M", time.gmtime(int(ds.sample_times.max())))
        lines.append(f"{name:12s} {len(ds):9d} {len(np.unique(ds.district_ids)):10d}  {t0:20s} {t1:20s}")
    lines.append(f"{'all':12s} {sum(len(p) for p in parts):9d} {len(districts):10d}")
    return "\n".join(lines)


def cmd_featurize(args, cfg):
    side = _events_sidecar(args.events)
    sim_cfg = sim.SimConfig(**side["config"]["sim"])
    sim_cfg.weather_multipliers = tuple(sim_cfg.weather_multipliers)
    if sim.file_hash(args.districts) != side["districts_hash"]:
        raise CompatibilityError(f"{args.districts} is not the district file used by the simulator")
    districts = geo.read_districts(args.districts)
    log = sim.read_events(args.events)
    check_drain(log)
    calendar = sim.RegimeCalendar.read(args.events + ".weather")
    mc = cfg.model
    data = F.prepare(log, districts, calendar, sim_cfg, mc.m, mc.n, mc.n_x, mc.n_y, cfg.features)
    out = args.out
    os.makedirs(out, exist_ok=True)
    parts = (data.train, data.validation, data.test)
    manifest = {
        "events_hash": side["events_hash"],
        "config": cfg.to_dict(),
        "stats_hash": data.stats.hash(),
        "vocab": data.vocab.to_json(),
        "vocab_sizes": list(data.vocab.sizes()),
        "feature_order_hash": F.feature_order_hash(),
        "m": mc.m, "n": mc.n, "n_x": mc.n_x, "n_y": mc.n_y,
        "splits": {},
    }
    for name, ds in zip(SPLITS, parts):
        ds.save(os.path.join(out, f"{name}.npz"))
        manifest["splits"][name] = {
            "n_samples": len(ds),
            "n_districts": int(len(np.unique(ds.district_ids))),
            "first_tick": int(ds.sample_times.min()),
            "last_tick": int(ds.sample_times.max()),
            "fingerprint": ds.fingerprint(),
        }
    F.stats_to_file(os.path.join(out, "stats.json"), data.stats)
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(dataset_summary(parts, districts))
    return EXIT_OK


@dataclass
class LoadedData:
    train: F.Dataset
    validation: F.Dataset
    test: F.Dataset
    manifest: dict


def load_data(path):
    manifest = _read_json(os.path.join(path, "manifest.json"))
    if manifest.get("feature_order_hash") != F.feature_order_hash():
        raise CompatibilityError(f"{path}: built with a different feature order")
    stats = F.stats_from_file(os.path.join(path, "stats.json"))
    if stats.hash() != manifest["stats_hash"]:
        raise CompatibilityError(f"{path}/stats.json does not match the manifest")
    parts = []
    for name in SPLITS:
        ds = F.Dataset.load(os.path.join(path, f"{name}.npz"), stats=stats)
        if ds.fingerprint() != manifest["splits"][name]["fingerprint"]:
            raise CompatibilityError(f"{path}/{name}.npz does not match the manifest")
        parts.append(ds)
    return LoadedData(*parts, manifest)


def model_config_for(cfg, data):
    m = data.manifest
    mc = cfg.model
    for key in ("m", "n", "n_x", "n_y"):
        if getattr(mc, key) != m[key]:
            raise CompatibilityError(
                f"model.{key}={getattr(mc, key)} but the dataset was built with {key}={m[key]}")
    return replace(mc, vocab_sizes=tuple(m["vocab_sizes"])).validate()


def cmd_train(args, cfg):
    data = load_data(args.data)
    mconf = model_config_for(cfg, data)
    out = args.out
    os.makedirs(out, exist_ok=True)
    tconf = replace(cfg.train, seed=cfg.seed, checkpoint_dir=out)
    model = STTM(mconf, seed=cfg.seed)
    t0 = time.time()
    result = train(model, data.train, data.validation, tconf,
                   log_path=os.path.join(out, "train_log.csv"), threshold=cfg.eval.threshold)
    _write_json(os.path.join(out, "run.json"), {
        "config": cfg.to_dict(),
        "data_fingerprints": {k: v["fingerprint"] for k, v in data.manifest["splits"].items()},
        "checkpoint": os.path.basename(result.checkpoint_path),
        "checkpoint_fingerprint": model.fingerprint(),
        "best_step": result.best_step,
        "best_val_mae": result.best_val_mae,
        "steps": result.steps,
    })
    print(f"steps={result.steps} best_step={result.best_step} best_val_mae={result.best_val_mae:.4f} "
          f"params={model.num_params()} seconds={time.time() - t0:.1f}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    data = load_data(args.data)
    header = read_checkpoint_header(args.checkpoint)
    if header.get("train_fingerprint") != data.manifest["splits"]["train"]["fingerprint"]:
        raise CompatibilityError(f"{args.checkpoint} was trained on a different dataset than {args.data}")
    model, _ = load_checkpoint(args.checkpoint)
    split = getattr(data, args.split)
    report = ev.evaluate(model, split, args.split, cfg.eval.threshold)
    print(report.summary())
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
        arm = ev.ArmResult(args.split, cfg.seed, report, model.num_params())
        ev.write_reports([arm], args.out + ".csv", args.out + ".jsonl")
    return EXIT_OK


def _check_arms(results):
    failed = [r for r in results if r.report is None]
    return EXIT_INTERNAL if failed else EXIT_OK


def cmd_ablate(args, cfg):
    data = load_data(args.data)
    mconf = model_config_for(cfg, data)
    seeds = tuple(args.seeds) if args.seeds else cfg.eval.seeds
    results = ev.run_ablation(data, mconf, cfg.train, seeds=seeds, variants=cfg.eval.variants,
                              threshold=cfg.eval.threshold, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    ev.write_reports(results, os.path.join(args.out, "ablation.csv"),
                     os.path.join(args.out, "ablation.jsonl"))
    _write_json(os.path.join(args.out, "ablation.config.json"), {
        "config": cfg.to_dict(), "seeds": list(seeds),
        "data_fingerprints": {k: v["fingerprint"] for k, v in data.manifest["splits"].items()}})
    print(ev.format_ablation(results))
    return _check_arms(results)


SWEEP_FLAG = {"N": "n", "M": "m", "L_mem": "l_mem"}


def cmd_sweep(args, cfg):
    data = load_data(args.data)
    mconf = model_config_for(cfg, data)
    param = SWEEP_FLAG[args.param]
    values = args.values or cfg.eval.sweep_values or None
    results = ev.run_sweep(data, mconf, cfg.train, param, values, seed=cfg.seed,
                           threshold=cfg.eval.threshold, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"sweep_{param}")
    ev.write_reports(results, stem + ".csv", stem + ".jsonl")
    _write_json(stem + ".config.json", {
        "config": cfg.to_dict(), "param": param, "values": [r.value for r in results],
        "data_fingerprints": {k: v["fingerprint"] for k, v in data.manifest["splits"].items()}})
    print(f"{args.param:>6s} {'MAE':>9s} {'MSE':>10s}")
    for r in results:
        if r.report is None:
            print(f"{r.value:>6} FAILED {r.error}")
        else:
            print(f"{r.value:>6} {r.report.mae:9.4f} {r.report.mse:10.4f}")
    return _check_arms(results)


# ------------------------------------------------------------------ parser

class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the user-error code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = ArgumentParser(prog="sttm", description="Synthetic delivery-pressure forecasting pipeline.")
    p.add_argument("--workdir", default=".", help="root directory for all relative paths (default: .)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    sub.required = True

    s = sub.add_parser("simulate", help="generate an order event log")
    s.add_argument("--config", help="key-value config file")
    s.add_argument("--out", default="events.psv", help="event log path (default: events.psv)")
    s.add_argument("--districts-out", help="district file path (default: <out>.districts.csv)")
    s.add_argument("--seed", type=int, help="override sim.seed")

    s = sub.add_parser("featurize", help="build train/validation/test datasets from an event log")
    s.add_argument("--events", default="events.psv", help="event log from simulate (default: events.psv)")
    s.add_argument("--districts", help="district file (default: <events>.districts.csv)")
    s.add_argument("--config", help="key-value config file")
    s.add_argument("--out", default="data", help="dataset directory (default: data)")

    s = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    s.add_argument("--data", default="data", help="dataset directory (default: data)")
    s.add_argument("--config", help="key-value config file")
    s.add_argument("--out", default="run", help="run directory (default: run)")

    s = sub.add_parser("evaluate", help="report MAE, MSE and AMAE of a checkpoint")
    s.add_argument("--data", default="data", help="dataset directory (default: data)")
    s.add_argument("--checkpoint", default="run/best.ckpt", help="checkpoint (default: run/best.ckpt)")
    s.add_argument("--split", choices=SPLITS, default="test", help="split to score (default: test)")
    s.add_argument("--config", help="key-value config file")
    s.add_argument("--out", help="report path stem; writes <out>.csv and <out>.jsonl")

    s = sub.add_parser("ablate", help="train the full model and every single-component ablation")
    s.add_argument("--data", default="data", help="dataset directory (default: data)")
    s.add_argument("--config", help="key-value config file")
    s.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: eval.seeds)")
    s.add_argument("--jobs", type=int, default=1, help="parallel arms (default: 1)")
    s.add_argument("--out", default="reports", help="report directory (default: reports)")

    s = sub.add_parser("sweep", help="retrain over a grid of one hyperparameter")
    s.add_argument("--data", default="data", help="dataset directory (default: data)")
    s.add_argument("--config", help="key-value config file")
    s.add_argument("--param", choices=sorted(SWEEP_FLAG), required=True, help="parameter to vary")
    s.add_argument("--values", type=_int_list,
                   help="comma-separated values (default: 1..6 for N and M, 8..18 step 2 for L_mem)")
    s.add_argument("--jobs", type=int, default=1, help="parallel arms (default: 1)")
    s.add_argument("--out", default="reports", help="report directory (default: reports)")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def _resolve(workdir, args):
    for name in ("config", "out", "districts_out", "events", "districts", "data", "checkpoint"):
        v = getattr(args, name, None)
        if v is not None and not os.path.isabs(v):
            setattr(args, name, os.path.join(workdir, v))
    if args.command == "featurize" and args.districts is None:
        args.districts = args.events + ".districts.csv"


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _resolve(args.workdir, args)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("must be >= 1", field="--jobs")
        cfg = load_run_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except SttmError as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - last-resort classification for the exit code
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
