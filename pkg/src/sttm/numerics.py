"""Dense float64 arrays with tape-based reverse-mode differentiation, plus Adam.

Only the operations the forecasting model needs are provided. Every op
returns a new :class:`Tensor`; when any input requires a gradient the result
remembers its parents and a closure mapping the output gradient to input
gradients. :func:`backward` walks that graph in reverse topological order.
"""

import numpy as np

from .errors import ContractError, NumericError, ShapeError

LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {list(a.shape)} with {list(b.shape)}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def dropout(x, rate, train, rng):
    """Inverted dropout. Exact identity when ``train`` is false or rate is 0."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions

def sum(x, axis=None):  # noqa: A001
    data = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(data, (x,), back)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# -------------------------------------------------------------------- products

def matmul(a, b):
    """``a[..., k] @ b[k, n]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    k, n = b.shape
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, k)  # one 2-D GEMM instead of many small batched ones

    def back(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result((a2 @ b.data).reshape(lead + (n,)), (a, b), back)


def bmm(a, b):
    """Batched product ``a[..., i, k] @ b[..., k, j]`` with identical batch dims."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {list(a.shape)} and {list(b.shape)}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), back)


# ------------------------------------------------------------------- structure

def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take(x, index, axis):
    """Select a single position along ``axis`` (the axis is dropped)."""
    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise IndexError(f"take: index {index} out of range for axis of size {x.shape[axis]}")
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)

    def back(g):
        full = np.zeros(x.shape)
        full[sl] = g
        return (full,)

    return _result(x.data[sl], (x,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[list(t.shape) for t in tensors]} differ off axis {axis}"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def embedding_lookup(table, ids, feature="embedding"):
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].reshape(-1)[0]
        raise IndexError(f"{feature}: id {int(bad)} outside vocabulary of size {table.shape[0]}")

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), back)


# ---------------------------------------------------------------- normalizers

def softmax(x, axis=-1):
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


def layer_norm(x, gain, bias):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {list(gain.shape)} / bias {list(bias.shape)} vs last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        flat = g.reshape(-1, d)
        ggain = (flat * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = flat.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(xhat * gain.data + bias.data, (x, gain, bias), back)


# -------------------------------------------------------------------- backward

def _topological(root):
    """Post-order DFS: every node appears after all of its parents."""
    order, done = [], set()
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in done:
                done.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss):
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable ``v`` requiring grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        # intermediate grads may alias a sibling's; treat them as read-only
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction. ``step`` consumes and clears gradients."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or '?'} has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params if p.grad is not None])))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total
