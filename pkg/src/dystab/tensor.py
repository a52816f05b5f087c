"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` replays the recorded graph in reverse
topological order. Values are float32 unless a ``precision`` block asks for
float64 (used by the finite-difference gradient checks).
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DTYPE = np.float32
EPS = 1e-8
_DT = [DTYPE]


def dt():
    """Floating dtype currently used for tensor values."""
    return _DT[-1]


@contextmanager
def precision(dtype):
    _DT.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DT.pop()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=dt())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse pass -----------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside build no graph."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _make(data, parents, backward):
    rg = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b, eps=EPS):
    """``a / (b + eps)``; ``eps`` guards the denominator."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    den = b.data + dt()(eps)
    out = a.data / den

    def bw(g):
        return (_unbroadcast(g / den, a.shape), _unbroadcast(-g * out / den, b.shape))

    return _make(out, (a, b), bw)


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, dt()(0)), (x,), lambda g: (g * pos,))


def clamp_min(x, lo=0.0):
    """max(x, lo), gradient passes where x > lo."""
    x = as_tensor(x)
    keep = x.data > lo
    return _make(np.where(keep, x.data, dt()(lo)), (x,), lambda g: (g * keep,))


def clamp_max(x, hi):
    """min(x, hi), gradient passes where x < hi."""
    x = as_tensor(x)
    keep = x.data < hi
    return _make(np.where(keep, x.data, dt()(hi)), (x,), lambda g: (g * keep,))


def sigmoid(x):
    x = as_tensor(x)
    out = (1.0 / (1.0 + np.exp(-np.clip(x.data, -60, 60)))).astype(dt())
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def tabs(x):
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,))


def sqrt(x, eps=0.0):
    x = as_tensor(x)
    out = np.sqrt(np.maximum(x.data, 0) + dt()(eps))

    def bw(g):
        return (g * 0.5 / np.maximum(out, dt()(1e-12)),)

    return _make(out, (x,), bw)


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def softmax(x, axis=1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


# -- reductions / shape -----------------------------------------------------
def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(dt()),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def l2norm(x, axis=None, eps=1e-12):
    """Euclidean norm over ``axis`` (all axes by default)."""
    return sqrt(tsum(square(x), axis), eps)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw)


def concat(xs, axis=1):
    xs = [as_tensor(t) for t in xs]
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                            _unbroadcast(np.where(cond, 0, g), b.shape)))
