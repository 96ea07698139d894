"""MAE training loop with seeded batching and best-on-validation selection."""

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, NumericError, TrainingAborted
from .evaluation import ANOMALY_THRESHOLD, metrics
from .model import save_checkpoint

LOG_COLUMNS = ("step", "train_mae", "val_mae", "val_mse", "val_amae")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 512
    epochs: int = 1
    seed: int = 0
    shuffle: bool = True
    val_every: int = 50  # steps; validation also runs before the first and after the last step
    checkpoint_dir: str = None
    select_best: bool = True  # False keeps the final weights, as a plain 1-epoch run would
    clip_norm: float = 0.0  # 0 disables global-norm clipping
    micro_batch: int = 0  # split each batch for memory; 0 keeps it whole
    max_steps: int = 0  # 0 means no cap
    fit_label_scaling: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field="train.batch_size")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", field="train.epochs")
        if self.learning_rate < 0:
            raise ConfigError("must be >= 0", field="train.learning_rate")
        if self.val_every < 1:
            raise ConfigError("must be >= 1", field="train.val_every")
        if self.micro_batch < 0 or self.max_steps < 0 or self.clip_norm < 0:
            raise ConfigError("micro_batch, max_steps and clip_norm must be >= 0", field="train")
        return self


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    best_step: int = 0
    best_val_mae: float = math.inf
    steps: int = 0
    checkpoint_path: str = None


def mae_loss(predictions, labels):
    """Mean absolute error; the subgradient at ties is 0."""
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.data.shape != labels.shape:
        raise ContractError(f"predictions {predictions.data.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise ContractError("empty batch")
    return nx.mean(nx.abs(predictions - nx.Tensor(labels)))


def fit_label_scaling(model, train):
    y = train.labels
    model.label_shift = float(y.mean())
    model.label_scale = float(y.std()) or 1.0


def batch_hash(idx):
    return hashlib.sha256(np.ascontiguousarray(idx, dtype=np.int64).tobytes()).hexdigest()[:16]


def _validate(model, val, threshold):
    pred = model.predict_dataset(val)
    mae, mse, amae, _ = metrics(val.labels, pred, threshold)
    return mae, mse, amae


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


class TrainingLog:
    """Append-only CSV: one row per step plus one per validation pass."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path
        if path:
            with open(path, "w") as fh:
                fh.write(",".join(LOG_COLUMNS) + "\n")

    def append(self, **row):
        rec = {k: row.get(k) for k in LOG_COLUMNS}
        self.rows.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(",".join(_fmt(rec[k]) for k in LOG_COLUMNS) + "\n")


def train(model, train_set, val_set, config=None, log_path=None, threshold=ANOMALY_THRESHOLD):
    config = (config or TrainConfig()).validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("train and validation splits must be non-empty")
    if config.fit_label_scaling:
        fit_label_scaling(model, train_set)
    params = model.parameters()
    opt = nx.Adam(params, lr=config.learning_rate)
    order_rng = np.random.default_rng([config.seed, 0])
    dropout_rng = np.random.default_rng([config.seed, 1])
    log = TrainingLog(log_path)
    result = TrainResult(model)

    def checkpoint_eval(step):
        mae, mse, amae = _validate(model, val_set, threshold)
        log.append(step=step, val_mae=mae, val_mse=mse, val_amae=amae)
        if not math.isfinite(mae):
            raise TrainingAborted(f"validation MAE is {mae} at step {step}", step=step)
        if mae < result.best_val_mae:
            result.best_val_mae, result.best_step = mae, step
            best_state[0] = model.state()

    best_state = [None]
    checkpoint_eval(0)
    n = len(train_set)
    bs = config.batch_size
    micro = config.micro_batch or bs
    step = 0
    done = False
    for _ in range(config.epochs):
        order = order_rng.permutation(n) if config.shuffle else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            total = 0.0
            for m0 in range(0, len(idx), micro):
                sub = idx[m0:m0 + micro]
                try:
                    pred = model.forward(train_set.x_a(sub), train_set.coords[sub], train_set.x_b[sub],
                                         train=True, rng=dropout_rng)
                    # sum over the micro-batch, divided by the full batch size
                    loss = nx.scale(nx.sum(nx.abs(pred - nx.Tensor(train_set.labels[sub]))),
                                    1.0 / len(idx))
                except NumericError as e:
                    loss = nx.Tensor(np.nan)
                    cause = str(e)
                else:
                    cause = ""
                if not np.isfinite(loss.data):
                    for p in params:
                        p.grad = None
                    raise TrainingAborted(
                        f"non-finite loss at step {step + 1}, batch {batch_hash(idx)} {cause}".strip(),
                        step=step + 1, batch_hash=batch_hash(idx))
                nx.backward(loss)
                total += float(loss.data)
            if config.clip_norm:
                nx.clip_grad_norm(params, config.clip_norm)
            opt.step()
            step += 1
            log.append(step=step, train_mae=total)
            if step % config.val_every == 0:
                checkpoint_eval(step)
            if config.max_steps and step >= config.max_steps:
                done = True
                break
        if done:
            break
    if step % config.val_every:
        checkpoint_eval(step)
    result.steps = step
    if config.select_best:
        model.load_state(best_state[0])
    else:
        result.best_step = step
        result.best_val_mae = log.rows[-1]["val_mae"]
    result.log = log.rows
    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        path = os.path.join(config.checkpoint_dir, "best.ckpt" if config.select_best else "last.ckpt")
        save_checkpoint(path, model, {"step": result.best_step, "val_mae": result.best_val_mae,
                                      "train_fingerprint": train_set.fingerprint()})
        result.checkpoint_path = path
    return result
