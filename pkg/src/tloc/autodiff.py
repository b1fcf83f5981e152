"""Dense f64 tensors with reverse-mode automatic differentiation.

Just enough operator coverage for the dual-branch transformer: broadcasted
arithmetic, matmul, shape ops, softmax, layer norm, GELU, cross entropy and
embedding lookup. Gradients accumulate into .grad buffers on backward().
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # allocated lazily on first accumulation
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        g = _unbroadcast(g, t.data.shape)
        if t.grad is None:
            # take ownership of freshly computed buffers, copy views
            if g.base is None and g.flags.owndata and g.flags.writeable:
                t.grad = g
            else:
                t.grad = np.array(g)
        else:
            t.grad += g


def _ensure_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, (a, b), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def getitem(a, key) -> Tensor:
    a = _wrap(a)

    def backward(g):
        # basic (slice/int) indexing only: addressed elements are unique
        if a.requires_grad:
            _ensure_grad(a)[key] += g

    return _make(a.data[key], (a,), backward)


def concat(tensors, axis) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _ensure_grad(a)
            a.grad += np.broadcast_to(g, a.data.shape)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _ensure_grad(a)
            a.grad += np.broadcast_to(g, a.data.shape) / n

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def softmax(x, axis=-1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))

    return _make(y, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-6, axis=-1) -> Tensor:
    """Zero mean / unit variance along `axis` (population variance), then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data

    def backward(g):
        _accum(gain, g * xhat)
        _accum(bias, g)
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=axis, keepdims=True)
            m2 = (gx * xhat).mean(axis=axis, keepdims=True)
            _accum(x, inv_std * (gx - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x = _wrap(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi_cdf

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            _accum(x, g * (phi_cdf + x.data * pdf))

    return _make(out_data, (x,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.data.shape}")
    b, k = logits.data.shape
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {b}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), targets].mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(b), targets] -= 1.0
            _accum(logits, g * p / b)

    return _make(loss, (logits,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup into a [V, d] table by an integer id array."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        if table.requires_grad:
            np.add.at(_ensure_grad(table), ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _make(table.data[ids], (table,), backward)


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar root."""
    if loss.data.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def parameters_like(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
