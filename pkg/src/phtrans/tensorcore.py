"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to per-parent gradients.
:func:`backward` walks the recorded graph once in reverse topological order.
Arrays are plain numpy buffers; nothing here knows about GPUs.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32

GELU_APPROXIMATE = "tanh"  # "tanh" | "erf"


class GraphConsumedError(RuntimeError):
    """Raised when backward is run through a graph that was already consumed."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, (np.ndarray, np.generic)) or arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str = "leaf"
        self._consumed = False

    # construction helpers -------------------------------------------------
    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Wrap an op result. ``backward(g)`` returns one gradient (or None) per parent."""
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor.from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return Tensor.from_op(out, (a, b), bw, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    a = _as_tensor(a)

    def bw(g):
        return (g * s,)

    return Tensor.from_op(a.data * a.data.dtype.type(s), (a,), bw, "scale")


def elementwise(a, b, kind: str) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scale`` (``b`` a scalar)."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kshape), shape),)

    return Tensor.from_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return Tensor.from_op(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# views / rearrangements
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (
        -1 not in shape and int(np.prod(shape)) != x.size
    ) or (-1 in shape and (np.prod(known) == 0 or x.size % int(np.prod(known)))):
        raise ValueError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim if -x.ndim <= a < x.ndim else -1 for a in axes) != list(range(x.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    return Tensor.from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def pad_zero(x: Tensor, pad) -> Tensor:
    """Zero-pad; ``pad`` is one (before, after) pair per axis or an int for all."""
    if isinstance(pad, int):
        pad = [(pad, pad)] * x.ndim
    pad = [tuple(int(v) for v in p) for p in pad]
    if len(pad) != x.ndim or any(v < 0 for p in pad for v in p):
        raise ValueError(f"pad_zero: bad pad widths {pad} for shape {x.shape}")
    sl = tuple(slice(b, b + n) for (b, _), n in zip(pad, x.shape))
    return Tensor.from_op(np.pad(x.data, pad), (x,), lambda g: (g[sl],), "pad_zero")


def crop(x: Tensor, bounds) -> Tensor:
    """Keep ``[lo, hi)`` per axis; ``bounds`` lists one pair per axis."""
    bounds = [tuple(int(v) for v in b) for b in bounds]
    if len(bounds) != x.ndim:
        raise ValueError(f"crop: need {x.ndim} bounds, got {len(bounds)}")
    for (lo, hi), n in zip(bounds, x.shape):
        if not 0 <= lo < hi <= n:
            raise ValueError(f"crop: bounds {bounds} outside shape {x.shape}")
    sl = tuple(slice(lo, hi) for lo, hi in bounds)
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        out[sl] = g
        return (out,)

    return Tensor.from_op(x.data[sl], (x,), bw, "crop")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in xs]} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor.from_op(np.concatenate([t.data for t in xs], axis=ax), xs, bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


def view(x: Tensor, kind: str, arg=None) -> Tensor:
    """Dispatch by name: reshape, permute, pad_zero, crop, concat_channels."""
    if kind == "reshape":
        return reshape(x, arg)
    if kind == "permute":
        return permute(x, arg)
    if kind == "pad_zero":
        return pad_zero(x, arg)
    if kind == "crop":
        return crop(x, arg)
    if kind == "concat_channels":
        return concat_channels(x, arg)
    raise ValueError(f"unknown view kind {kind!r}")


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(idx)

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return Tensor.from_op(np.asarray(x.data[idx]), (x,), bw, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def cyclic_roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int] | None = None) -> Tensor:
    """Circular shift; by default ``shifts`` apply to the trailing spatial axes."""
    shifts = tuple(int(s) for s in shifts)
    if axes is None:
        axes = tuple(range(x.ndim - len(shifts), x.ndim))
    axes = tuple(axes)
    shifts = tuple(s % x.shape[a] for s, a in zip(shifts, axes))
    if not any(shifts):
        return Tensor.from_op(x.data, (x,), lambda g: (g,), "roll")
    neg = tuple(-s for s in shifts)
    return Tensor.from_op(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, neg, axes),), "roll")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), bw, "log_softmax")


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor, approximate: str | None = None) -> Tensor:
    mode = approximate or GELU_APPROXIMATE
    xd = x.data
    if mode == "tanh":
        x2 = xd * xd
        t = np.tanh(xd * (_SQRT_2_OVER_PI * (1.0 + 0.044715 * x2)))
        out = 0.5 * xd * (1.0 + t)

        def bw(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    elif mode == "erf":
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        out = xd * cdf

        def bw(g):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2 * math.pi)
            return (g * (cdf + xd * pdf),)

    else:
        raise ValueError(f"unknown GELU approximation {mode!r}")
    return Tensor.from_op(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


def index_select(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]``; gradient scatter-adds back into the table."""
    index = np.asarray(index)
    rows, dtype = table.shape[0], table.dtype
    flat = index.reshape(-1)

    def bw(g):
        g2 = g.reshape(flat.size, -1)
        out = np.zeros((rows, g2.shape[1]), dtype=dtype)
        for j in range(g2.shape[1]):
            out[:, j] = np.bincount(flat, weights=g2[:, j], minlength=rows)
        return (out.reshape(table.shape),)

    return Tensor.from_op(table.data[index], (table,), bw, "index_select")


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------
# Internally activations are kept channel-first, (C, B, D, H, W), so that a
# kernel tap becomes a (Cout, Cin) @ (Cin, voxels) product.

CONV_PATH = "im2col"  # "im2col" (one GEMM per op) | "direct" (per-tap accumulate)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def _tap_slice(k: tuple[int, int, int], s: tuple[int, int, int], out_sp) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(k[i], k[i] + s[i] * (out_sp[i] - 1) + 1, s[i]) for i in range(3)
    )


def _taps(ks) -> list[tuple[int, int, int]]:
    return list(itertools.product(*(range(k) for k in ks)))


def _im2col(xp: np.ndarray, ks, s, out_sp) -> np.ndarray:
    cin, B = xp.shape[:2]
    n = B * int(np.prod(out_sp))
    taps = _taps(ks)
    cols = np.empty((cin, len(taps), n), dtype=xp.dtype)
    for t, tap in enumerate(taps):
        cols[:, t] = xp[_tap_slice(tap, s, out_sp)].reshape(cin, n)
    return cols.reshape(cin * len(taps), n)


def _corr(xp: np.ndarray, w: np.ndarray, s, out_sp, path: str | None = None) -> np.ndarray:
    """Cross-correlate padded channel-first ``xp`` (Cin,B,D,H,W) with ``w`` (Cout,Cin,k,k,k)."""
    cout, cin = w.shape[:2]
    ks = w.shape[2:]
    B = xp.shape[1]
    n = B * int(np.prod(out_sp))
    if (path or CONV_PATH) == "im2col":
        out = w.reshape(cout, -1) @ _im2col(xp, ks, s, out_sp)
    else:
        out = np.zeros((cout, n), dtype=xp.dtype)
        for tap in _taps(ks):
            sl = xp[_tap_slice(tap, s, out_sp)].reshape(cin, n)
            out += w[(slice(None), slice(None)) + tap] @ sl
    return out.reshape((cout, B) + tuple(out_sp))


def _corr_wgrad(xp: np.ndarray, g: np.ndarray, s, ks, path: str | None = None) -> np.ndarray:
    """Weight gradient (Cout,Cin,k,k,k) for ``_corr`` given upstream ``g`` (Cout,B,...)."""
    cin, cout = xp.shape[0], g.shape[0]
    out_sp = g.shape[2:]
    n = g.shape[1] * int(np.prod(out_sp))
    g2 = g.reshape(cout, n)
    if (path or CONV_PATH) == "im2col":
        return (g2 @ _im2col(xp, ks, s, out_sp).T).reshape((cout, cin) + tuple(ks))
    dw = np.empty((cout, cin) + tuple(ks), dtype=g.dtype)
    for tap in _taps(ks):
        sl = xp[_tap_slice(tap, s, out_sp)].reshape(cin, n)
        dw[(slice(None), slice(None)) + tap] = g2 @ sl.T
    return dw


def _corr_dgrad(g: np.ndarray, w: np.ndarray, s, padded_sp, path: str | None = None) -> np.ndarray:
    """Adjoint of ``_corr`` w.r.t. its padded input: scatter taps back."""
    cout, cin = w.shape[:2]
    ks = w.shape[2:]
    B = g.shape[1]
    out_sp = tuple(g.shape[2:])
    n = B * int(np.prod(out_sp))
    g2 = g.reshape(cout, n)
    dxp = np.zeros((cin, B) + tuple(padded_sp), dtype=g.dtype)
    taps = _taps(ks)
    if (path or CONV_PATH) == "im2col":
        cols = (w.reshape(cout, -1).T @ g2).reshape(cin, len(taps), B, *out_sp)
        for t, tap in enumerate(taps):
            dxp[_tap_slice(tap, s, out_sp)] += cols[:, t]
        return dxp
    for tap in taps:
        contrib = w[(slice(None), slice(None)) + tap].T @ g2
        dxp[_tap_slice(tap, s, out_sp)] += contrib.reshape((cin, B) + out_sp)
    return dxp


def _cfirst(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3, 4))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, path: str | None = None) -> Tensor:
    """3D cross-correlation, ``x`` (B,Cin,D,H,W), ``w`` (Cout,Cin,kd,kh,kw)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    s, p = _triple(stride), _triple(padding)
    ks = w.shape[2:]
    sp = x.shape[2:]
    padded = tuple(sp[i] + 2 * p[i] for i in range(3))
    if any(ks[i] > padded[i] for i in range(3)):
        raise ValueError(f"conv3d: kernel {ks} larger than padded input {padded}")
    out_sp = tuple((padded[i] - ks[i]) // s[i] + 1 for i in range(3))
    xc = _cfirst(x.data)
    xp = np.pad(xc, ((0, 0), (0, 0)) + tuple((pi, pi) for pi in p)) if any(p) else xc
    wd = w.data
    out = _corr(xp, wd, s, out_sp, path)
    if b is not None:
        out += b.data.reshape(-1, 1, 1, 1, 1)
    crop_sl = (slice(None), slice(None)) + tuple(slice(p[i], p[i] + sp[i]) for i in range(3))

    def bw(g):
        gc = _cfirst(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _corr_dgrad(gc, wd, s, padded, path)[crop_sl].transpose(1, 0, 2, 3, 4)
        if w.requires_grad:
            gw = _corr_wgrad(xp, gc, s, ks, path)
        if b is not None and b.requires_grad:
            gb = gc.sum(axis=(1, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out.transpose(1, 0, 2, 3, 4), parents, bw, "conv3d")


def conv3d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride=2, padding=0) -> Tensor:
    """Transposed 3D convolution, ``w`` laid out (Cin, Cout, kd, kh, kw).

    The forward pass is the data-gradient of :func:`conv3d` with the same
    weight array, so the two ops are exact adjoints.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d_transpose expects 5D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv3d_transpose: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    s, p = _triple(stride), _triple(padding)
    if min(s) < 1:
        raise ValueError(f"conv3d_transpose: stride must be >= 1, got {s}")
    ks = w.shape[2:]
    sp = x.shape[2:]
    padded = tuple((sp[i] - 1) * s[i] + ks[i] for i in range(3))
    out_sp = tuple(padded[i] - 2 * p[i] for i in range(3))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"conv3d_transpose: kernel {ks}, stride {s}, padding {p} give empty output")
    wd = w.data
    xc = _cfirst(x.data)
    full = _corr_dgrad(xc, wd, s, padded)
    crop_sl = (slice(None), slice(None)) + tuple(slice(p[i], p[i] + out_sp[i]) for i in range(3))
    out = full[crop_sl]
    if b is not None:
        out = out + b.data.reshape(-1, 1, 1, 1, 1)

    def bw(g):
        gc = _cfirst(g)
        gp = np.pad(gc, ((0, 0), (0, 0)) + tuple((pi, pi) for pi in p)) if any(p) else gc
        gx = gw = gb = None
        if x.requires_grad:
            gx = _corr(gp, wd, s, sp).transpose(1, 0, 2, 3, 4)
        if w.requires_grad:
            gw = _corr_wgrad(gp, xc, s, ks)
        if b is not None and b.requires_grad:
            gb = gc.sum(axis=(1, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4)), parents, bw, "conv3d_transpose")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Reverse-topological record of the ops reachable from a scalar loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # producers before consumers

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._consumed:
                raise GraphConsumedError(
                    "backward through a graph that was already consumed; recompute the forward pass"
                )
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    g = np.asarray(g, dtype=node.dtype)
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it; consumes the graph."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran for this loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    tape.run(np.ones(loss.shape, dtype=loss.dtype))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    tol: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3, tol: float = 1e-3,
               seed: int = 0, indices: Iterable[int] | None = None) -> GradCheckReport:
    """Compare autodiff against central differences for ``f`` at ``x``.

    Non-scalar outputs are reduced with a fixed random projection evaluated in
    float64. The error is ``max|a - n| / max(max|a|, max|n|)`` over the checked
    coordinates. ``indices`` restricts the check to a subset of flat positions.
    """
    probe = f(Tensor(x.data))
    proj = None
    if probe.size != 1:
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def value(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr)).data.astype(np.float64)
        return float(out.sum()) if proj is None else float((out * proj).sum())

    xa = Tensor(x.data.copy(), requires_grad=True)
    out = f(xa)
    if proj is not None:
        out = tsum(mul(out, Tensor(proj.astype(out.dtype))))
    backward(out)
    analytic = xa.grad.astype(np.float64).reshape(-1)

    base = x.data.reshape(-1)
    idx = np.arange(base.size) if indices is None else np.asarray(list(indices))
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        plus, minus = base.copy(), base.copy()
        plus[i] = base[i] + eps
        minus[i] = base[i] - eps
        h = float(plus[i]) - float(minus[i])
        numeric[j] = (value(plus.reshape(x.shape)) - value(minus.reshape(x.shape))) / h
    a = analytic[idx]
    denom = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    err = float(np.abs(a - numeric).max(initial=0.0) / denom)
    return GradCheckReport(err, a, numeric, tol)
