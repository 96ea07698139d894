"""Spatio-temporal transformer with a pattern-memory head.

Data flow for a batch of B samples (shapes in brackets)::

    x_a [B,M,N,D_A] -> @W_xa + TPE -> temporal encoder per district
        -> last-slice token [B,M,H] -> + SPE_x + SPE_y -> spatial encoder
        -> center token o_spatial [B,H]
    x_b [B,6] ids -> six embeddings -> concat -> @W_xb -> x_tilde_b [B,H']
    q = [o_spatial || x_tilde_b] @ W_q + b_q                      [B,D_mem]
    weights = softmax(q @ W_mem^T); alpha = weights @ W_mem        [B,D_mem]
    y_hat = MLP([o_spatial || q || alpha]) * label_scale + label_shift
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .errors import CompatibilityError, ConfigError, ShapeError
from .features import D_A, D_B, FIXED_VOCAB, SENSITIVE_NAMES, feature_order_hash
from .numerics import Tensor

CHECKPOINT_VERSION = 1

ABLATIONS = {
    "full": {},
    "no_tpe": {"use_tpe": False},
    "no_spe": {"use_spe": False},
    "no_temporal_transformer": {"use_temporal_transformer": False},
    "no_spatial_transformer": {"use_spatial_transformer": False},
    "no_memory": {"use_memory": False},
}
ABLATION_TITLES = {
    "full": "STTM",
    "no_tpe": "w/o Temporal Position Embedding",
    "no_spe": "w/o Spatial Position Embedding",
    "no_temporal_transformer": "w/o Temporal Transformer",
    "no_spatial_transformer": "w/o Spatial Transformer",
    "no_memory": "w/o Memory Network",
}


def _default_vocab():
    return (2, 31, FIXED_VOCAB["minute"], FIXED_VOCAB["peak"], FIXED_VOCAB["day_of_week"],
            FIXED_VOCAB["weather"])


@dataclass(frozen=True)
class SttmConfig:
    m: int = 10
    n: int = 6
    d_a: int = D_A
    d_b: int = D_B
    n_x: int = 10
    n_y: int = 10
    h: int = 256
    layers: int = 1
    e: int = 8
    h_mem: int = 256
    l_mem: int = 12
    d_mem: int = 64
    heads: int = 4
    ffn_dim: int = 0  # 0 means 4 * h
    dropout: float = 0.1
    mlp_hidden: int = 256
    vocab_sizes: tuple = field(default_factory=_default_vocab)
    use_tpe: bool = True
    use_spe: bool = True
    use_temporal_transformer: bool = True
    use_spatial_transformer: bool = True
    use_memory: bool = True

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))

    @property
    def ffn(self):
        return self.ffn_dim or 4 * self.h

    def validate(self):
        for f in ("m", "n", "d_a", "d_b", "n_x", "n_y", "h", "layers", "e", "h_mem", "l_mem",
                  "d_mem", "heads", "mlp_hidden"):
            if getattr(self, f) < 1:
                raise ConfigError(f"must be positive, got {getattr(self, f)}", field=f"model.{f}")
        if self.h % self.heads:
            raise ConfigError(f"h={self.h} not divisible by heads={self.heads}", field="model.heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must be in [0, 1)", field="model.dropout")
        if len(self.vocab_sizes) != self.d_b:
            raise ConfigError(f"need {self.d_b} vocabulary sizes", field="model.vocab_sizes")
        return self

    def variant(self, name):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(ABLATIONS)}",
                              field="variant")
        return replace(self, **ABLATIONS[name])

    def to_dict(self):
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="model")
        return cls(**d)

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _encoder_shapes(prefix, c):
    h, f = c.h, c.ffn
    out = {}
    for l in range(c.layers):
        p = f"{prefix}.{l}."
        for w in ("q", "k", "v", "o"):
            out[p + "w" + w] = (h, h)
            out[p + "b" + w] = (h,)
        out[p + "w1"] = (h, f)
        out[p + "b1"] = (f,)
        out[p + "w2"] = (f, h)
        out[p + "b2"] = (h,)
        for ln in ("ln1", "ln2"):
            out[p + ln + "_g"] = (h,)
            out[p + ln + "_b"] = (h,)
    return out


def param_shapes(c):
    """Ordered name -> shape map of every learnable weight under config ``c``."""
    s = {}
    if c.use_tpe:
        s["tpe"] = (c.n, c.h)
    if c.use_spe:
        s["spe_x"] = (2 * c.n_x, c.h)
        s["spe_y"] = (2 * c.n_y, c.h)
    s["w_xa"] = (c.d_a, c.h)
    if c.use_temporal_transformer:
        s.update(_encoder_shapes("temporal", c))
    if c.use_spatial_transformer:
        s.update(_encoder_shapes("spatial", c))
    for name, vocab in zip(SENSITIVE_NAMES, c.vocab_sizes):
        s[f"emb.{name}"] = (vocab, c.e)
    s["w_xb"] = (c.d_b * c.e, c.h_mem)
    if c.use_memory:
        s["w_q"] = (c.h + c.h_mem, c.d_mem)
        s["b_q"] = (c.d_mem,)
        s["w_mem"] = (c.l_mem, c.d_mem)
        head_in = c.h + 2 * c.d_mem
    else:
        head_in = c.h + c.h_mem
    s["mlp.w1"] = (head_in, c.mlp_hidden)
    s["mlp.b1"] = (c.mlp_hidden,)
    s["mlp.w2"] = (c.mlp_hidden, 1)
    s["mlp.b2"] = (1,)
    return s


def count_params(c):
    return int(sum(math.prod(shape) for shape in param_shapes(c).values()))


def init_params(config, seed):
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class ForwardTrace:
    x_tilde_a: np.ndarray
    o_temporal: np.ndarray
    o_spatial: np.ndarray
    x_tilde_b: np.ndarray
    q: np.ndarray = None
    alpha: np.ndarray = None
    pattern_weights: np.ndarray = None
    y_hat: np.ndarray = None


class STTM:
    def __init__(self, config, params=None, seed=0, label_shift=0.0, label_scale=1.0):
        self.config = config.validate()
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if list(self.params) != list(expected) or any(
            self.params[k].shape != v for k, v in expected.items()
        ):
            raise CompatibilityError("parameter set does not match the model config")
        self.label_shift = float(label_shift)
        self.label_scale = float(label_scale)

    def parameters(self):
        return list(self.params.values())

    def num_params(self):
        return int(sum(p.data.size for p in self.params.values()))

    # -- building blocks

    def temporal_position_embedding(self, n):
        if not 0 <= n < self.config.n:
            raise IndexError(f"slice index {n} outside [0, {self.config.n})")
        return self.params["tpe"].data[n]

    def spatial_position_embedding(self, x_m, y_m):
        c = self.config
        if not (0 <= x_m < 2 * c.n_x and 0 <= y_m < 2 * c.n_y):
            raise IndexError(f"relative coords ({x_m}, {y_m}) outside [0,{2 * c.n_x})x[0,{2 * c.n_y})")
        return self.params["spe_x"].data[x_m] + self.params["spe_y"].data[y_m]

    def _linear(self, x, w, b=None):
        out = nx.matmul(x, self.params[w])
        return out if b is None else out + self.params[b]

    def _encoder_layer(self, x, prefix, readout, train, rng):
        c = self.config
        s, t, h = x.shape
        heads, dh = c.heads, h // c.heads
        xq = x if readout is None else nx.reshape(nx.take(x, readout, axis=1), (s, 1, h))
        tq = xq.shape[1]
        q = self._linear(xq, prefix + "wq", prefix + "bq")
        k = self._linear(x, prefix + "wk", prefix + "bk")
        v = self._linear(x, prefix + "wv", prefix + "bv")
        qh = nx.transpose(nx.reshape(q, (s, tq, heads, dh)), (0, 2, 1, 3))
        kh = nx.transpose(nx.reshape(k, (s, t, heads, dh)), (0, 2, 3, 1))
        vh = nx.transpose(nx.reshape(v, (s, t, heads, dh)), (0, 2, 1, 3))
        att = nx.softmax(nx.scale(nx.bmm(qh, kh), 1.0 / math.sqrt(dh)), axis=-1)
        ctx = nx.reshape(nx.transpose(nx.bmm(att, vh), (0, 2, 1, 3)), (s, tq, h))
        a = self._linear(ctx, prefix + "wo", prefix + "bo")
        y = nx.layer_norm(xq + nx.dropout(a, c.dropout, train, rng),
                          self.params[prefix + "ln1_g"], self.params[prefix + "ln1_b"])
        f = self._linear(nx.relu(self._linear(y, prefix + "w1", prefix + "b1")), prefix + "w2", prefix + "b2")
        return nx.layer_norm(y + nx.dropout(f, c.dropout, train, rng),
                             self.params[prefix + "ln2_g"], self.params[prefix + "ln2_b"])

    def encode(self, x, stack, readout, train=False, rng=None):
        """Post-norm encoder stack on [S,T,H]; the last layer is evaluated only at ``readout``.

        Returns [S,H]. Skipping the other query positions in the final layer
        is exact: no later computation reads them.
        """
        layers = self.config.layers
        for l in range(layers):
            last = l == layers - 1
            x = self._encoder_layer(x, f"{stack}.{l}.", readout if last else None, train, rng)
        s, _, h = x.shape
        return nx.reshape(x, (s, h))

    def embed_sensitive(self, x_b):
        c = self.config
        x_b = np.asarray(x_b, dtype=np.int64)
        embs = []
        for i, name in enumerate(SENSITIVE_NAMES):
            ids = x_b[:, i]
            ids = np.where((ids < 0) | (ids >= c.vocab_sizes[i]), 0, ids)
            embs.append(nx.embedding_lookup(self.params[f"emb.{name}"], ids, feature=name))
        return nx.matmul(nx.concat(embs, axis=-1), self.params["w_xb"])

    def memory(self, o_spatial, x_tilde_b):
        """Returns (q, alpha, pattern weights)."""
        q = self._linear(nx.concat([o_spatial, x_tilde_b], axis=-1), "w_q", "b_q")
        w_mem = self.params["w_mem"]
        weights = nx.softmax(nx.matmul(q, nx.transpose(w_mem, (1, 0))), axis=-1)
        alpha = nx.matmul(weights, w_mem)
        return q, alpha, weights

    # -- forward

    def forward(self, x_a, coords, x_b, train=False, rng=None, trace=False):
        c = self.config
        x_a = np.asarray(x_a, dtype=np.float64)
        coords = np.asarray(coords, dtype=np.int64)
        if x_a.ndim != 4 or x_a.shape[1:] != (c.m, c.n, c.d_a):
            raise ShapeError(f"x_a shape {list(x_a.shape)} != [B, {c.m}, {c.n}, {c.d_a}]")
        b = x_a.shape[0]
        if coords.shape != (b, c.m, 2):
            raise ShapeError(f"coords shape {list(coords.shape)} != [{b}, {c.m}, 2]")
        if np.shape(x_b) != (b, c.d_b):
            raise ShapeError(f"x_b shape {list(np.shape(x_b))} != [{b}, {c.d_b}]")
        p = self.params

        xt = nx.matmul(Tensor(x_a), p["w_xa"])
        if c.use_tpe:
            xt = xt + p["tpe"]
        seq = nx.reshape(xt, (b * c.m, c.n, c.h))
        if c.use_temporal_transformer:
            o_t = self.encode(seq, "temporal", c.n - 1, train, rng)
        else:
            o_t = nx.take(seq, c.n - 1, axis=1)
        o_t = nx.reshape(o_t, (b, c.m, c.h))

        tokens = o_t
        if c.use_spe:
            tokens = (tokens + nx.embedding_lookup(p["spe_x"], coords[..., 0], feature="spe_x")
                      + nx.embedding_lookup(p["spe_y"], coords[..., 1], feature="spe_y"))
        if c.use_spatial_transformer:
            o_s = self.encode(tokens, "spatial", 0, train, rng)
        else:
            o_s = nx.mean(tokens, axis=1)

        xb = self.embed_sensitive(x_b)
        q = alpha = weights = None
        if c.use_memory:
            q, alpha, weights = self.memory(o_s, xb)
            z = nx.concat([o_s, q, alpha], axis=-1)
        else:
            z = nx.concat([o_s, xb], axis=-1)
        hidden = nx.dropout(nx.relu(self._linear(z, "mlp.w1", "mlp.b1")), c.dropout, train, rng)
        out = nx.reshape(self._linear(hidden, "mlp.w2", "mlp.b2"), (b,))
        y = nx.scale(out, self.label_scale) + self.label_shift
        if not trace:
            return y
        return y, ForwardTrace(
            xt.data, o_t.data, o_s.data, xb.data,
            None if q is None else q.data,
            None if alpha is None else alpha.data,
            None if weights is None else weights.data,
            y.data,
        )

    def predict(self, x_a, coords, x_b, batch_size=1024):
        """Inference-mode predictions as a numpy array (minutes)."""
        n = len(x_a)
        out = np.empty(n)
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            out[sl] = self.forward(x_a[sl], coords[sl], x_b[sl]).data
        return out

    def predict_dataset(self, ds, batch_size=1024):
        n = len(ds)
        out = np.empty(n)
        for i in range(0, n, batch_size):
            idx = np.arange(i, min(i + batch_size, n))
            out[idx] = self.forward(ds.x_a(idx), ds.coords[idx], ds.x_b[idx]).data
        return out

    # -- persistence

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].data[...] = v

    def fingerprint(self):
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        h.update(np.array([self.label_shift, self.label_scale]).tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(path, model, extra=None):
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "feature_order_hash": feature_order_hash(),
        "label_shift": model.label_shift,
        "label_scale": model.label_scale,
        "fingerprint": model.fingerprint(),
    }
    header.update(extra or {})
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    return header


def read_checkpoint_header(path):
    with np.load(path) as z:
        return json.loads(bytes(z["header"]).decode())


def load_checkpoint(path, expected_config=None):
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise CompatibilityError(f"{path}: checkpoint version {header.get('version')} unsupported")
        if header.get("feature_order_hash") != feature_order_hash():
            raise CompatibilityError(f"{path}: checkpoint built for a different feature order")
        config = SttmConfig.from_dict(header["config"])
        if expected_config is not None and expected_config != config:
            raise CompatibilityError(f"{path}: checkpoint config differs from the requested config")
        names = list(param_shapes(config))
        params = {k: Tensor(z[f"param/{k}"], requires_grad=True, name=k) for k in names}
    model = STTM(config, params, label_shift=header["label_shift"], label_scale=header["label_scale"])
    if model.fingerprint() != header["fingerprint"]:
        raise CompatibilityError(f"{path}: parameter blobs do not match the stored fingerprint")
    return model, header
