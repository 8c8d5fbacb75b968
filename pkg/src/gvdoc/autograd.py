"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the ops the model needs are provided. Every op records a closure that
accumulates into its parents' ``grad``; :func:`backward` replays the tape in
reverse topological order. Each op checks its output for NaN/Inf.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import BackwardError, NonFiniteError, ShapeError

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "recorded", "name")

    def __init__(self, data, parents=(), backward=None, name=None, recorded=True):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.recorded = recorded
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and (arr.dtype.kind == "f" or arr.ndim == 0):
        arr = arr.astype(dtype)
    return Tensor(arr)


def parameter(data, name=None):
    return Tensor(np.array(data), name=name)


def _make(data, parents, backward, what):
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    if not _GRAD_ENABLED[-1]:
        return Tensor(data, recorded=False)
    return Tensor(data, parents, backward)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back, "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back, "mul")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data), "log")


def leaky_relu(a, slope=0.2):
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: _accum(a, np.where(pos, g, slope * g)), "leaky_relu")


def elu(a):
    pos = a.data > 0
    em1 = np.expm1(np.minimum(a.data, 0))
    out = np.where(pos, a.data, em1)
    return _make(out, (a,), lambda g: _accum(a, np.where(pos, g, g * (em1 + 1))), "elu")


# -- shape / reduction ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a):
    return tsum(a) * (1.0 / a.data.size)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)),
                 "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back,
                 "concat")


def getitem(a, key):
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _make(a.data[key], (a,), back, "getitem")


def scatter_rows(idx, g, n):
    """``out[k] = sum of g[e] for idx[e] == k`` (deterministic, sequential)."""
    out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, g)
    return out


def take(a, idx):
    """Gather rows ``a[idx]`` along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _make(a.data[idx], (a,), lambda g: _accum(a, scatter_rows(idx, g, n)), "take")


def segment_sum(a, seg, n):
    """Sum rows of ``a`` into ``n`` buckets given by ``seg``."""
    seg = np.asarray(seg, dtype=np.int64)
    return _make(scatter_rows(seg, a.data, n), (a,), lambda g: _accum(a, g[seg]),
                 "segment_sum")


def segment_softmax(a, seg, n):
    """Softmax of rows of ``a`` within each segment (per trailing column)."""
    seg = np.asarray(seg, dtype=np.int64)
    mx = np.full((n,) + a.shape[1:], -np.inf, dtype=a.dtype)
    np.maximum.at(mx, seg, a.data)
    e = np.exp(a.data - mx[seg])
    out = e / scatter_rows(seg, e, n)[seg]

    def back(g):
        dot = scatter_rows(seg, g * out, n)
        _accum(a, out * (g - dot[seg]))

    return _make(out, (a,), back, "segment_softmax")


def log_softmax(a):
    z = a.data - a.data.max(-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(-1, keepdims=True))

    def back(g):
        _accum(a, g - np.exp(out) * g.sum(-1, keepdims=True))

    return _make(out, (a,), back, "log_softmax")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits)
    picked = getitem(lp, (np.arange(len(targets)), targets))
    return -mean(picked)


def mse(pred, target):
    diff = pred - as_tensor(np.asarray(target, dtype=pred.dtype))
    return mean(diff * diff)


# -- tape ----------------------------------------------------------------------

def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on the tape.

    Args:
        loss: scalar tensor produced with gradient recording enabled.
        params: optional mapping name -> leaf tensor; when given, returns a
            dict of gradients (zeros for parameters the loss does not reach).
    """
    if not isinstance(loss, Tensor) or not loss.recorded:
        raise BackwardError("backward() needs a loss computed with gradient recording")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return None
    # parameters off this tape may still hold grads from an earlier call
    on_tape = {id(node) for node in order}
    return {name: (p.grad if id(p) in on_tape and p.grad is not None
                   else np.zeros_like(p.data))
            for name, p in params.items()}
