"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable op builds a new `Tensor` carrying vector-Jacobian
callbacks back to its inputs; `Tensor.backward()` walks the graph once in
reverse topological order and accumulates gradients on every reachable node.
Arrays are float32 by default; a float64 scope exists for finite-difference
gradient checks.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_DEFAULT_DTYPE = np.float32
_tls = threading.local()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (thread-local), for inference passes."""
    prev = grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class Tensor:
    """A dense array plus the tape entries needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False, _vjps=()):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._vjps = _vjps  # tuple of (input Tensor, fn(upstream grad) -> grad contribution)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, fn in node._vjps:
                contrib = fn(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    # -- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _coerce(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, vjps) -> Tensor:
    if grad_enabled():
        vjps = tuple((t, fn) for t, fn in vjps if t.requires_grad)
        if vjps:
            return Tensor(data, requires_grad=True, _vjps=vjps)
    return Tensor(data)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, b.data if isinstance(b, Tensor) else None)
    b = _coerce(b, a.data)
    out = a.data + b.data
    return _make(out, ((a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(g, b.data.shape))))


def sub(a, b) -> Tensor:
    a = _coerce(a, b.data if isinstance(b, Tensor) else None)
    b = _coerce(b, a.data)
    out = a.data - b.data
    return _make(out, ((a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(-g, b.data.shape))))


def mul(a, b) -> Tensor:
    a = _coerce(a, b.data if isinstance(b, Tensor) else None)
    b = _coerce(b, a.data)
    out = a.data * b.data
    return _make(out, ((a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                       (b, lambda g: _unbroadcast(g * a.data, b.data.shape))))


def div(a, b) -> Tensor:
    a = _coerce(a, b.data if isinstance(b, Tensor) else None)
    b = _coerce(b, a.data)
    out = a.data / b.data
    return _make(out, ((a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
                       (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))))


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    out = a.data ** p
    return _make(out, ((a, lambda g: g * p * a.data ** (p - 1.0)),))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _make(out, ((a, lambda g: g * out),))


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.data)
    return _make(out, ((a, lambda g: g / a.data),))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _make(out, ((a, lambda g: g * (1.0 - out * out)),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """tanh-approximate GELU; smooth, so finite differences stay clean."""
    a = _coerce(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _make(out, ((a, vjp),))


def rsqrt(a) -> Tensor:
    """1/sqrt(x) with a fast backward (x must be positive)."""
    a = _coerce(a)
    out = 1.0 / np.sqrt(a.data)

    def vjp(g):
        return g * (-0.5 * out * out * out)

    return _make(out, ((a, vjp),))


# -- shape ops ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    return _make(out, ((a, lambda g: g.reshape(a.data.shape)),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))
    return _make(out, ((a, lambda g: g.transpose(inv)),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    vjps = []
    offset = 0
    for t in tensors:
        n = t.data.shape[axis]
        start = offset

        def vjp(g, start=start, n=n, t=t):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            return np.ascontiguousarray(g[tuple(sl)])

        vjps.append((t, vjp))
        offset += n
    return _make(out, tuple(vjps))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries starting at `start` along `axis`."""
    a = _coerce(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        return full

    return _make(out, ((a, vjp),))


def tile0(a, reps: int) -> Tensor:
    """Stack `reps` copies along a new leading axis."""
    a = _coerce(a)
    out = np.broadcast_to(a.data, (reps,) + a.data.shape).copy()
    return _make(out, ((a, lambda g: g.sum(axis=0)),))


def embed_rows(table, ids) -> Tensor:
    """Gather rows of `table` by integer ids; backward scatter-adds."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return full

    return _make(out, ((table, vjp),))


# -- reductions / linear algebra ------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(np.asarray(out), ((a, vjp),))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Matrix product; supports identical leading batch dims via np.matmul."""
    a = _coerce(a, b.data if isinstance(b, Tensor) else None)
    b = _coerce(b, a.data)
    out = a.data @ b.data

    def vjp_a(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        return _unbroadcast(ga, a.data.shape) if ga.shape != a.data.shape else ga

    def vjp_b(g):
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(gb, b.data.shape) if gb.shape != b.data.shape else gb

    return _make(out, ((a, vjp_a), (b, vjp_b)))


def softmax_last(a) -> Tensor:
    """Numerically stable softmax along the last axis (shift is constant)."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=-1, keepdims=True)
    out = e / s

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _make(out, ((a, vjp),))
