"""Parameterized layers and the 3D window machinery used by the transformer path."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

MASK_VALUE = -1e9


class Parameter(Tensor):
    """Learnable tensor; ``role`` drives initialization (weight, bias, gain, table)."""

    __slots__ = ("role", "fan_in")

    def __init__(self, data, role: str = "weight", fan_in: int | None = None):
        super().__init__(np.asarray(data, dtype=tc.get_default_dtype()), requires_grad=True)
        self.role = role
        self.fan_in = fan_in


class Module:
    """Minimal container: parameters and submodules are discovered from attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_init(layer: Module, rng: np.random.Generator | int = 0) -> None:
    """Kaiming-normal weights, std sqrt(2/fan_in); zero biases, unit gains, zero tables."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    for _, p in layer.named_parameters():
        if p.role == "weight":
            std = math.sqrt(2.0 / p.fan_in)
            p.data[...] = (rng.standard_normal(p.shape) * std).astype(p.dtype)
        elif p.role == "gain":
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _normalize(x: Tensor, gain: Tensor | None, bias: Tensor | None, axes: tuple[int, ...],
               affine_shape: tuple[int, ...], eps: float, op: str) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = xhat * gain.data.reshape(affine_shape) + bias.data.reshape(affine_shape)
    red = tuple(i for i in range(xd.ndim) if affine_shape[i] == 1)

    def bw(g):
        gh = g if gain is None else g * gain.data.reshape(affine_shape)
        gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        if gain is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=red).reshape(gain.shape), g.sum(axis=red).reshape(bias.shape)

    parents = (x,) if gain is None else (x, gain, bias)
    return Tensor.from_op(out.astype(xd.dtype, copy=False), parents, bw, op)


def instance_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial voxels."""
    affine = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    return _normalize(x, gain, bias, tuple(range(2, x.ndim)), affine, eps, "instance_norm")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each token over its channels (last axis)."""
    affine = (1,) * (x.ndim - 1) + (x.shape[-1],)
    return _normalize(x, gain, bias, (x.ndim - 1,), affine, eps, "layer_norm")


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels), "gain")
        self.bias = Parameter(np.zeros(channels), "bias")
        self.eps = eps

    def forward(self, x):
        return instance_norm(x, self.gain, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels), "gain")
        self.bias = Parameter(np.zeros(channels), "bias")
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


# ---------------------------------------------------------------------------
# linear / convolutional layers
# ---------------------------------------------------------------------------

class Linear(Module):
    """``x @ weight + bias`` with weight stored (in, out)."""

    def __init__(self, cin: int, cout: int, bias: bool = True):
        self.weight = Parameter(np.zeros((cin, cout)), "weight", fan_in=cin)
        self.bias = Parameter(np.zeros(cout), "bias") if bias else None

    def forward(self, x):
        y = tc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None):
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel, kernel)), "weight", fan_in=cin * kernel ** 3)
        self.bias = Parameter(np.zeros(cout), "bias")
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def forward(self, x):
        return tc.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 2, stride: int = 2):
        self.weight = Parameter(np.zeros((cin, cout, kernel, kernel, kernel)), "weight", fan_in=cout * kernel ** 3)
        self.bias = Parameter(np.zeros(cout), "bias")
        self.stride = stride

    def forward(self, x):
        return tc.conv3d_transpose(x, self.weight, self.bias, self.stride, 0)


class ConvUnit(Module):
    """3x3x3 convolution, then GELU, then instance norm."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        self.conv = Conv3d(cin, cout, 3, stride, 1)
        self.norm = InstanceNorm(cout)

    def forward(self, x):
        return self.norm(tc.gelu(self.conv(x)))


class MLPBlock(Module):
    def __init__(self, channels: int, mlp_ratio: float = 4.0):
        hidden = max(1, int(round(channels * mlp_ratio)))
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(tc.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# volume <-> window sequence
# ---------------------------------------------------------------------------

def _check_windows(spatial: Sequence[int], window: Sequence[int]) -> None:
    for axis, (n, w) in enumerate(zip(spatial, window)):
        if n % w:
            raise ValueError(
                f"window {tuple(window)} does not evenly partition volume {tuple(spatial)}: "
                f"spatial axis {axis} has extent {n}, not divisible by {w}"
            )


def v2s(x: Tensor, window: Sequence[int]) -> Tensor:
    """(B,C,D,H,W) volume to (B*N, L, C) windows of L = prod(window) tokens."""
    B, C, D, H, W = x.shape
    wd, wh, ww = window
    _check_windows((D, H, W), window)
    t = x.reshape(B, C, D // wd, wd, H // wh, wh, W // ww, ww)
    t = t.permute(0, 2, 4, 6, 3, 5, 7, 1)
    return t.reshape(-1, wd * wh * ww, C)


def s2v(seq: Tensor, window: Sequence[int], volume_shape: Sequence[int]) -> Tensor:
    """Exact inverse of :func:`v2s`; ``volume_shape`` is (B,C,D,H,W)."""
    B, C, D, H, W = volume_shape
    wd, wh, ww = window
    _check_windows((D, H, W), window)
    n = B * (D // wd) * (H // wh) * (W // ww)
    if seq.shape != (n, wd * wh * ww, C):
        raise ValueError(f"s2v: sequence {seq.shape} inconsistent with volume {tuple(volume_shape)} and window {tuple(window)}")
    t = seq.reshape(B, D // wd, H // wh, W // ww, wd, wh, ww, C)
    t = t.permute(0, 7, 1, 4, 2, 5, 3, 6)
    return t.reshape(B, C, D, H, W)


def window_partition_ids(spatial: Sequence[int], window: Sequence[int]) -> np.ndarray:
    """Window index of every voxel, shape ``spatial``; windows numbered in v2s order."""
    grids = np.meshgrid(*[np.arange(n) // w for n, w in zip(spatial, window)], indexing="ij")
    counts = [n // w for n, w in zip(spatial, window)]
    return (grids[0] * counts[1] + grids[1]) * counts[2] + grids[2]


def shift_mask(volume_shape: Sequence[int], window: Sequence[int], shift: Sequence[int]) -> np.ndarray:
    """Additive (N, L, L) mask for attention on a volume rolled by ``-shift``.

    Tokens that are window neighbours only because of the cyclic wrap get
    ``MASK_VALUE``; all other pairs get 0.
    """
    spatial = tuple(volume_shape[-3:])
    _check_windows(spatial, window)
    for s, w in zip(shift, window):
        if not 0 <= s < w:
            raise ValueError(f"shift {tuple(shift)} must satisfy 0 <= shift < window {tuple(window)}")
    n_win = int(np.prod([n // w for n, w in zip(spatial, window)]))
    L = int(np.prod(window))
    if not any(shift):
        return np.zeros((n_win, L, L), dtype=np.float32)
    region = np.zeros(spatial, dtype=np.int64)
    for axis, (n, w, s) in enumerate(zip(spatial, window, shift)):
        if s == 0:
            continue
        ids = np.zeros(n, dtype=np.int64)
        ids[n - w:n - s] = 1
        ids[n - s:] = 2
        shape = [1, 1, 1]
        shape[axis] = n
        region = region * 3 + ids.reshape(shape)
    seq = v2s(Tensor(region[None, None].astype(np.float64)), window).data[:, :, 0]
    return np.where(seq[:, :, None] != seq[:, None, :], MASK_VALUE, 0.0).astype(np.float32)


def relative_position_index(window: Sequence[int]) -> np.ndarray:
    """(L, L) index into a ((2Wd-1)(2Wh-1)(2Ww-1)) relative-offset table."""
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + np.array([w - 1 for w in window])[:, None, None]
    d1, d2 = 2 * window[1] - 1, 2 * window[2] - 1
    return (rel[0] * d1 + rel[1]) * d2 + rel[2]


class WindowAttention(Module):
    """Multi-head self-attention within each window, optional relative position bias."""

    def __init__(self, channels: int, heads: int, window: Sequence[int], position_bias: bool = True):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by head count {heads}")
        self.channels, self.heads = channels, heads
        self.window = tuple(window)
        self.scale = (channels // heads) ** -0.5
        self.qkv = Linear(channels, 3 * channels)
        self.proj = Linear(channels, channels)
        if position_bias:
            size = int(np.prod([2 * w - 1 for w in self.window]))
            self.bias_table = Parameter(np.zeros((size, heads)), "table")
            self._rel_index = relative_position_index(self.window)
        else:
            self.bias_table = None
        self.last_attn: np.ndarray | None = None

    def forward(self, seq: Tensor, mask: np.ndarray | None = None, keep_attn: bool = False) -> Tensor:
        return window_msa(seq, self, mask, keep_attn)


def window_msa(seq: Tensor, attn: WindowAttention, mask: np.ndarray | None = None, keep_attn: bool = False) -> Tensor:
    """softmax(QK^T / sqrt(d) + bias + mask) V per window and head, then output projection."""
    BN, L, C = seq.shape
    h = attn.heads
    if C != attn.channels or C % h:
        raise ValueError(f"window_msa: {C} channels incompatible with {h} heads / layer width {attn.channels}")
    d = C // h
    qkv = attn.qkv(seq).reshape(BN, L, 3, h, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tc.matmul(tc.scale(q, attn.scale), k.permute(0, 1, 3, 2))
    if attn.bias_table is not None:
        bias = tc.index_select(attn.bias_table, attn._rel_index).permute(2, 0, 1)
        scores = scores + bias
    if mask is not None:
        nw = mask.shape[0]
        scores = scores.reshape(BN // nw, nw, h, L, L) + Tensor(mask[None, :, None].astype(seq.dtype))
        scores = scores.reshape(BN, h, L, L)
    weights = tc.softmax(scores, axis=-1)
    if keep_attn:
        attn.last_attn = weights.data
    out = tc.matmul(weights, v).permute(0, 2, 1, 3).reshape(BN, L, C)
    return attn.proj(out)
