"""Dense tensors and a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape they only compute
values, which is what evaluation and finite-difference checks rely on.
"""

from __future__ import annotations

import numpy as np

_DTYPE = np.float64
_TAPES: list["Tape"] = []

PROB_EPS = 1e-7


def set_default_dtype(dtype) -> None:
    """Switch the floating point width used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad=False, name=None, parents=(), grad_fn=None):
        self.value = np.asarray(value, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.grad_fn = grad_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=_DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are created, so the record is already in
    topological order and the backward sweep simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    def __contains__(self, node) -> bool:
        return id(node) in self._ids

    def __len__(self):
        return len(self.nodes)


def _make(value, parents, grad_fn) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value)
    out = Tensor(value, requires_grad=True, parents=parents, grad_fn=grad_fn)
    tape.record(out)
    return out


def backward(tape: Tape, loss: Tensor, params) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each of ``params``.

    Parameters the loss does not depend on get an exact zero array.
    """
    if loss not in tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.value > 0
    return _make(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def log(x, eps: float = PROB_EPS) -> Tensor:
    """Natural log with the input clamped to at least ``eps``."""
    x = as_tensor(x)
    clamped = np.maximum(x.value, eps)
    live = x.value >= eps
    return _make(np.log(clamped), (x,), lambda g: (g * live / clamped,))


# -- reductions and shape -------------------------------------------------

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    return _make(np.mean(x.value), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def grad_fn(g):
        out = np.zeros_like(x.value)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(x.value[index], (x,), grad_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(value, tuple(tensors), grad_fn)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.value[ids], (table,), grad_fn)


def take_last(x, ids: np.ndarray) -> Tensor:
    """Pick ``x[..., ids[...]]`` along the last axis (one entry per leading index)."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.intp)[..., None]
    value = np.take_along_axis(x.value, ids, axis=-1)[..., 0]

    def grad_fn(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, ids, g[..., None], axis=-1)
        return (out,)

    return _make(value, (x,), grad_fn)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), grad_fn)


# -- composite primitives with hand-written backward ----------------------

def softmax_lastdim(x, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False are exactly 0."""
    x = as_tensor(x)
    z = x.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit population variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    centred = x.value - mu
    var = (centred ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    n = x.shape[-1]

    def grad_fn(g):
        gx_hat = g * gain.value
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(xhat * gain.value + bias.value, (x, gain, bias), grad_fn)


def bce_loss(probs, labels, mask) -> Tensor:
    """Mean binary cross entropy over positions where ``mask`` is True."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=_DTYPE)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("bce_loss needs at least one unmasked position")
    p = np.clip(probs.value, PROB_EPS, 1.0 - PROB_EPS)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    value = np.sum(np.where(mask, terms, 0.0)) / n
    live = mask & (probs.value > PROB_EPS) & (probs.value < 1.0 - PROB_EPS)

    def grad_fn(g):
        d = (-labels / p + (1.0 - labels) / (1.0 - p)) / n
        return (g * np.where(live, d, 0.0),)

    return _make(value, (probs,), grad_fn)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(x)
    keep = (rng.random(as_tensor(x).shape) >= rate) / (1.0 - rate)
    return mul(x, keep)
