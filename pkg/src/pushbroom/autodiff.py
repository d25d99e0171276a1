"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive takes and returns :class:`Tensor` values. When any input
requires a gradient (and recording is not disabled with :func:`no_grad`) the
result keeps a reference to its parents plus a closure that maps the output
gradient to input gradients. Nodes get a monotonically increasing sequence
number at creation, so sorting reachable nodes by that number reproduces the
append order of the tape; :func:`backward` walks it in reverse.

Non-finite values are rejected the moment a tensor is created, which is the
op boundary for every primitive.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericError", "GraphError", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sigmoid", "silu",
    "softplus", "relu", "square", "matmul", "sum", "mean", "amax", "var", "softmax",
    "layernorm", "reshape", "transpose", "swapaxes", "getitem", "concat", "stack",
    "pad", "take", "conv1d", "conv_transpose1d", "depthwise_conv", "selective_scan",
]


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_seq = itertools.count()
_state = threading.local()
_CONSUMED = object()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in this thread (streaming inference)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value produced")


class Tensor:
    """Immutable n-d array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "id", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_array(data, dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_seq)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple:
    """Wrap binary operands; a plain scalar or array takes the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return _t(a), _t(b)


def _make(data: np.ndarray, parents: tuple, grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_seq)
    out.name = None
    out._op = op
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _t(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _t(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and several times faster than scipy's expit on float32
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _logistic(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = _t(a)
    s = _logistic(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = _t(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _logistic(x),), "softplus")


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * mask,), "relu")


def square(a) -> Tensor:
    a = _t(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------- linear algebra

def _gemm(a2: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-stable ``a2 @ b``: each output row is independent of how many rows come with it.

    BLAS picks different kernels (and summation orders) for row counts that are
    not a multiple of its 4-row tile, so short products are zero-padded first.
    This keeps batch outputs bitwise causal along the line axis.
    """
    m = a2.shape[0]
    pad = -m % 4
    if pad:
        a2 = np.concatenate([a2, np.zeros((pad, a2.shape[1]), dtype=a2.dtype)])
    # overflow surfaces as a NumericError from _make, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        return (a2 @ b)[:m]


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading batch axes.

    A 2-D right operand is applied as a single GEMM over all leading axes of
    ``a`` (the dense-layer case).
    """
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = _gemm(a2, b.data).reshape(a.shape[:-1] + (n,))

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), grad_fn, "matmul")
    if a.ndim < 2:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims) / n,), "mean")


def amax(a, axis=None, keepdims=False) -> Tensor:
    """Maximum; the gradient goes to the first maximal entry along ``axis``."""
    a = _t(a)
    if not isinstance(axis, int):
        raise ShapeError("amax: a single integer axis is required")
    axis = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out if keepdims else out.squeeze(axis), (a,), grad_fn, "amax")


def var(a, axis=None, keepdims=False) -> Tensor:
    """Population variance (ddof=0)."""
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = np.asarray((centered * centered).mean(axis=axes, keepdims=keepdims))
    return _make(out, (a,),
                 lambda g: (_expand(g, a.shape, axes, keepdims) * (2.0 / n) * centered,), "var")


def softmax(a, axis=-1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis; the affine part is left to callers."""
    a = _t(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    return _make(xhat, (a,), grad_fn, "layernorm")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = _t(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _t(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _t(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, idx) -> Tensor:
    a = _t(a)
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), grad_fn, "slice")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(x) for x in tensors]
    try:
        out = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError:
        shapes = [x.shape for x in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(x) for x in tensors]
    shapes = {x.shape for x in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([x.data for x in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def pad(a, widths, axis: int) -> Tensor:
    """Zero-pad ``widths=(before, after)`` entries along ``axis``."""
    a = _t(a)
    axis = axis % a.ndim
    before, after = widths
    spec = [(0, 0)] * a.ndim
    spec[axis] = (before, after)
    out = np.pad(a.data, spec)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)
    return _make(out, (a,), lambda g: (g[sl],), "pad")


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    a = _t(a)
    axis = axis % a.ndim
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), grad_fn, "take")


# ---------------------------------------------------------------- convolutions

def _axis_slice(ndim, axis, start, stop, step=1):
    sl = [slice(None)] * ndim
    sl[axis] = slice(start, stop, step)
    return tuple(sl)


def conv1d(x, w, b=None, stride: int = 1, padding=(0, 0)) -> Tensor:
    """Cross-correlation along axis -2 of ``x`` [..., N, C_in].

    ``w`` is [C_out, C_in, k]; tap ``t`` reads position ``i*stride + t`` of
    the zero-padded input.
    """
    x, w = _t(x), _t(w)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    c_out, c_in, k = w.shape
    pl, pr = padding
    n_in = x.shape[-2] + pl + pr
    if n_in < k:
        raise ShapeError(f"conv1d: padded length {n_in} shorter than kernel {k}")
    n_out = (n_in - k) // stride + 1
    spec = [(0, 0)] * x.ndim
    spec[-2] = (pl, pr)
    xp = np.pad(x.data, spec) if (pl or pr) else x.data
    nd = x.ndim
    taps = [_axis_slice(nd, nd - 2, t, t + stride * (n_out - 1) + 1, stride) for t in range(k)]
    lead = x.shape[:-2]
    out = np.zeros(lead + (n_out, c_out), dtype=np.result_type(x.data, w.data))
    for t in range(k):
        with np.errstate(over="ignore", invalid="ignore"):
            out += _gemm(xp[taps[t]].reshape(-1, c_in), w.data[:, :, t].T).reshape(out.shape)
    parents = (x, w)
    if b is not None:
        b = _t(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {b.shape} does not match {c_out} outputs")
        out = out + b.data
        parents = (x, w, b)

    def grad_fn(g):
        g2 = g.reshape(-1, c_out)
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for t in range(k):
            gw[:, :, t] = (xp[taps[t]].reshape(-1, c_in).T @ g2).T
            gxp[taps[t]] += (g2 @ w.data[:, :, t]).reshape(lead + (n_out, c_in))
        gx = gxp[_axis_slice(nd, nd - 2, pl, pl + x.shape[-2])]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, grad_fn, "conv1d")


def conv_transpose1d(x, w, b=None, stride: int = 2) -> Tensor:
    """Transpose convolution along axis -2; ``w`` is [C_out, C_in, k].

    Output length is ``(N - 1) * stride + k``.
    """
    x, w = _t(x), _t(w)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv_transpose1d: input {x.shape} incompatible with kernel {w.shape}")
    c_out, c_in, k = w.shape
    n = x.shape[-2]
    n_out = (n - 1) * stride + k
    lead = x.shape[:-2]
    nd = x.ndim
    taps = [_axis_slice(nd, nd - 2, t, t + stride * (n - 1) + 1, stride) for t in range(k)]
    out = np.zeros(lead + (n_out, c_out), dtype=np.result_type(x.data, w.data))
    x2 = x.data.reshape(-1, c_in)
    for t in range(k):
        with np.errstate(over="ignore", invalid="ignore"):
            out[taps[t]] += _gemm(x2, w.data[:, :, t].T).reshape(lead + (n, c_out))
    parents = (x, w)
    if b is not None:
        b = _t(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv_transpose1d: bias {b.shape} does not match {c_out} outputs")
        out = out + b.data
        parents = (x, w, b)

    def grad_fn(g):
        gx = np.zeros(lead + (n, c_in), dtype=out.dtype)
        gw = np.empty_like(w.data)
        for t in range(k):
            gt = g[taps[t]].reshape(-1, c_out)
            gx += (gt @ w.data[:, :, t]).reshape(gx.shape)
            gw[:, :, t] = gt.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c_out).sum(axis=0)

    return _make(out, parents, grad_fn, "conv_transpose1d")


def depthwise_conv(x, w, axis: int = -2, padding=(0, 0)) -> Tensor:
    """Per-channel correlation along ``axis``; channels on the last axis, ``w`` is [C, k]."""
    x, w = _t(x), _t(w)
    nd = x.ndim
    axis = axis % nd
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or axis == nd - 1:
        raise ShapeError(f"depthwise_conv: input {x.shape} incompatible with kernel {w.shape}")
    c, k = w.shape
    pl, pr = padding
    spec = [(0, 0)] * nd
    spec[axis] = (pl, pr)
    xp = np.pad(x.data, spec) if (pl or pr) else x.data
    n_out = xp.shape[axis] - k + 1
    if n_out < 1:
        raise ShapeError(f"depthwise_conv: padded length {xp.shape[axis]} shorter than kernel {k}")
    taps = [_axis_slice(nd, axis, t, t + n_out) for t in range(k)]
    out = xp[taps[0]] * w.data[:, 0]
    for t in range(1, k):
        out = out + xp[taps[t]] * w.data[:, t]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for t in range(k):
            gw[:, t] = (xp[taps[t]] * g).reshape(-1, c).sum(axis=0)
            gxp[taps[t]] += g * w.data[:, t]
        return gxp[_axis_slice(nd, axis, pl, pl + x.shape[axis])], gw

    return _make(out, (x, w), grad_fn, "depthwise_conv")


# ---------------------------------------------------------------- selective scan

def _scratch(shape, dtype) -> np.ndarray:
    """Per-thread reusable work array (streaming calls the scan once per line)."""
    key = (shape, np.dtype(dtype))
    cache = getattr(_state, "scratch", None)
    if cache is None or cache[0] != key:
        cache = (key, np.empty(shape, dtype=dtype))
        _state.scratch = cache
    return cache[1]


def selective_scan(u, delta, A, B, C, Dskip, h0=None, axis: int = -3):
    """Diagonal selective state-space recurrence along ``axis``.

    Shapes (``axis`` indexes the sequence, ``E`` channels, ``S`` states):
    ``u, delta`` [..., L, N, E]; ``B, C`` [..., L, N, S]; ``A`` [E, S];
    ``Dskip`` [E]; ``h0`` [..., N, S, E] (a constant, never differentiated).
    The state keeps channels innermost so the broadcasts run over long rows.

    For each step ``h = exp(delta*A) * h + (delta*u) B`` and
    ``y = <h, C> + Dskip*u``. Returns ``(y, h_last)`` where ``h_last`` is a
    plain array.
    """
    u, delta, A, B, C, Dskip = (_t(v) for v in (u, delta, A, B, C, Dskip))
    nd = u.ndim
    axis = axis % nd
    if delta.shape != u.shape or B.shape != C.shape or B.shape[:-1] != u.shape[:-1]:
        raise ShapeError(f"selective_scan: u {u.shape}, delta {delta.shape}, B {B.shape}, C {C.shape}")
    if A.shape != (u.shape[-1], B.shape[-1]) or Dskip.shape != (u.shape[-1],):
        raise ShapeError(f"selective_scan: A {A.shape} / D {Dskip.shape} vs channels {u.shape[-1]}")
    L = u.shape[axis]
    uu = np.moveaxis(u.data, axis, 0)
    dd = np.moveaxis(delta.data, axis, 0)
    BB = np.moveaxis(B.data, axis, 0)
    CC = np.moveaxis(C.data, axis, 0)
    AT = np.ascontiguousarray(A.data.T)  # [S, E]
    S, E = AT.shape
    state_shape = uu.shape[1:-1] + (S, E)
    h = np.zeros(state_shape, dtype=uu.dtype) if h0 is None else np.asarray(h0)
    if h.shape != state_shape:
        raise ShapeError(f"selective_scan: state {h.shape} expected {state_shape}")
    h_init = h
    keep = _recording() and any(t.requires_grad for t in (u, delta, A, B, C, Dskip))
    dt = np.result_type(uu, h)
    hs = np.empty((L,) + state_shape, dtype=dt) if keep else None
    ys = np.empty_like(uu)
    # ping-pong state buffers; the readout is a stacked [1,S]@[S,E] product on
    # contiguous operands so batch and streaming calls hit the same kernel
    bufs = [np.empty(state_shape, dtype=dt) for _ in range(min(L, 2))]
    scratch = _scratch(state_shape, dt)
    for l in range(L):
        nxt = bufs[l % 2]
        np.multiply(dd[l][..., None, :], AT, out=nxt)
        np.exp(nxt, out=nxt)
        np.multiply(nxt, h, out=nxt)
        np.multiply((dd[l] * uu[l])[..., None, :], BB[l][..., None], out=scratch)
        nxt += scratch
        h = nxt
        if keep:
            hs[l] = h
        c = np.ascontiguousarray(CC[l][..., None, :])
        ys[l] = np.matmul(c, h)[..., 0, :] + Dskip.data * uu[l]
    y = np.moveaxis(ys, 0, axis)

    def grad_fn(g):
        gg = np.moveaxis(g, axis, 0)
        gu = np.empty_like(uu)
        gd = np.empty_like(dd)
        gB = np.empty_like(BB)
        gC = np.empty_like(CC)
        gAT = np.zeros_like(AT)
        gD = np.zeros_like(Dskip.data)
        dh_next = np.zeros(state_shape, dtype=hs.dtype)
        for l in range(L - 1, -1, -1):
            h_l = hs[l]
            h_prev = hs[l - 1] if l > 0 else h_init
            gy = gg[l]
            gC[l] = (gy[..., None, :] * h_l).sum(axis=-1)
            dh = gy[..., None, :] * CC[l][..., None] + dh_next
            dA = np.exp(dd[l][..., None, :] * AT)
            g_dA = dh * h_prev * dA
            dhB = (dh * BB[l][..., None]).sum(axis=-2)
            gd[l] = (g_dA * AT).sum(axis=-2) + dhB * uu[l]
            gAT += (g_dA * dd[l][..., None, :]).reshape(-1, S, E).sum(axis=0)
            gu[l] = dhB * dd[l] + Dskip.data * gy
            gB[l] = (dh * (dd[l] * uu[l])[..., None, :]).sum(axis=-1)
            gD += (gy * uu[l]).reshape(-1, E).sum(axis=0)
            dh_next = dh * dA
        mv = lambda arr: np.moveaxis(arr, 0, axis)  # noqa: E731
        return mv(gu), mv(gd), gAT.T, mv(gB), mv(gC), gD

    out = _make(y, (u, delta, A, B, C, Dskip), grad_fn, "selective_scan")
    return out, h


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, params=None, retain_graph: bool = False) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{tensor.id: gradient array}`` for every reached leaf that
    requires a gradient; each entry is also stored in ``leaf.grad``. Leaves
    listed in ``params`` but not reached get zero gradients. Unless
    ``retain_graph`` is set the closures are dropped, so a second sweep over
    the same graph raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss is not connected to any recorded graph")
    nodes = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        stack_.extend(p for p in node._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda n: n.id, reverse=True)
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in order:
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if not node._parents:
            if node._backward is _CONSUMED:
                raise GraphError("backward: graph already consumed")
            leaves[node.id] = (node, g)
            continue
        if node._backward is _CONSUMED:
            raise GraphError("backward: graph already consumed")
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
    if not retain_graph:
        for node in order:
            if node._parents:
                node._backward = _CONSUMED
                node._parents = ()
    result = {}
    for nid, (leaf, g) in leaves.items():
        g = np.array(np.broadcast_to(g, leaf.shape), dtype=leaf.dtype)
        leaf.grad = g
        result[nid] = g
    for p in params or ():
        if p.id not in result:
            p.grad = np.zeros_like(p.data)
            result[p.id] = p.grad
    return result
