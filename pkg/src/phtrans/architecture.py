"""PHTrans: U-shaped network with parallel shifted-window transformer and conv paths.

Stage ``s`` runs at ``input_shape / 2**s`` with ``C * 2**s`` channels. The
first ``n1`` stages are pure convolution; the remaining ``n2`` stages are
Trans&Conv blocks summing a windowed-transformer path and a conv path.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .layers import (
    Conv3d,
    ConvTranspose3d,
    ConvUnit,
    InstanceNorm,
    LayerNorm,
    MLPBlock,
    Module,
    WindowAttention,
    he_init,
    s2v,
    shift_mask,
    v2s,
    window_msa,
)
from .tensorcore import Tensor


@dataclass
class PHTransConfig:
    n1: int = 2
    n2: int = 3
    m1: int = 2
    m2: int = 2
    base_channels: int = 16
    heads: tuple[int, ...] = (4, 4, 4)
    windows: tuple[tuple[int, int, int], ...] = ((4, 4, 4), (4, 4, 4), (4, 4, 4))
    mlp_ratio: float = 1.0
    num_classes: int = 2
    input_shape: tuple[int, int, int] = (64, 64, 64)
    downsample_count: int = 4
    position_bias: bool = True
    in_channels: int = 1
    downsample_kernel: int = 2
    seed: int = 0
    note: str = ""

    def __post_init__(self):
        self.heads = tuple(int(h) for h in self.heads)
        self.windows = tuple(tuple(int(v) for v in w) for w in self.windows)
        self.input_shape = tuple(int(v) for v in self.input_shape)

    @property
    def num_stages(self) -> int:
        return self.n1 + self.n2

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def stage_shape(self, stage: int) -> tuple[int, int, int]:
        return tuple(n // 2 ** stage for n in self.input_shape)

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        return [self.stage_shape(s) for s in range(self.num_stages)]

    def hybrid(self, stage: int) -> bool:
        return stage >= self.n1

    def validate(self) -> "PHTransConfig":
        errors = []
        if self.n1 < 1 or self.n2 < 0 or self.m1 < 0 or self.m2 < 1:
            errors.append(f"bad stage counts n1={self.n1} n2={self.n2} m1={self.m1} m2={self.m2}")
        if self.downsample_count != self.n1 + self.n2 - 1:
            errors.append(f"downsample_count {self.downsample_count} != n1 + n2 - 1 = {self.n1 + self.n2 - 1}")
        if len(self.heads) != self.n2 or len(self.windows) != self.n2:
            errors.append(f"need {self.n2} head counts and windows, got {len(self.heads)} and {len(self.windows)}")
        total = 2 ** self.downsample_count
        for axis, n in enumerate(self.input_shape):
            if n % total:
                errors.append(f"input axis {axis} extent {n} not divisible by 2**{self.downsample_count}")
        if not errors:
            for i, (h, w) in enumerate(zip(self.heads, self.windows)):
                s = self.n1 + i
                c = self.channels(s)
                if c % h:
                    errors.append(f"stage {s}: {c} channels not divisible by {h} heads")
                shape = self.stage_shape(s)
                for axis, (n, wv) in enumerate(zip(shape, w)):
                    if n % wv:
                        errors.append(f"stage {s}: resolution {shape} axis {axis} not divisible by window {w}")
        if errors:
            raise ValueError("invalid PHTransConfig: " + "; ".join(errors))
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PHTransConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# PHTrans-L heads use [3,6,12,24] (constant head width 48); the [3,4,12,24]
# variant is kept as phtrans_l_table.
_PRESETS: dict[str, dict] = {
    "phtrans_l": dict(n1=2, n2=4, m1=2, m2=2, base_channels=36, heads=(3, 6, 12, 24),
                      windows=((4, 5, 5),) * 4, mlp_ratio=4.0, num_classes=14,
                      input_shape=(128, 160, 160), downsample_count=5),
    "phtrans_l_table": dict(n1=2, n2=4, m1=2, m2=2, base_channels=36, heads=(3, 4, 12, 24),
                            windows=((4, 5, 5),) * 4, mlp_ratio=4.0, num_classes=14,
                            input_shape=(128, 160, 160), downsample_count=5,
                            note="alternative head counts; 144 channels split as 36 per head"),
    "phtrans_s_coarse": dict(n1=2, n2=3, m1=2, m2=2, base_channels=16, heads=(4, 4, 4),
                             windows=((4, 4, 4),) * 3, mlp_ratio=1.0, num_classes=2,
                             input_shape=(64, 64, 64), downsample_count=4),
    "phtrans_s_fine": dict(n1=2, n2=3, m1=2, m2=2, base_channels=16, heads=(4, 4, 4),
                           windows=((4, 4, 4), (4, 4, 4), (3, 4, 4)), mlp_ratio=1.0, num_classes=14,
                           input_shape=(96, 192, 192), downsample_count=4),
    # desk-scale variants used by the CPU pipeline and tests
    "desk_teacher": dict(n1=2, n2=2, m1=2, m2=2, base_channels=8, heads=(2, 4),
                         windows=((4, 4, 4), (4, 4, 4)), mlp_ratio=2.0, num_classes=5,
                         input_shape=(32, 32, 32), downsample_count=3),
    "desk_coarse": dict(n1=1, n2=2, m1=2, m2=2, base_channels=4, heads=(1, 2),
                        windows=((4, 4, 4), (4, 4, 4)), mlp_ratio=1.0, num_classes=2,
                        input_shape=(16, 16, 16), downsample_count=2),
    "desk_fine": dict(n1=2, n2=2, m1=2, m2=2, base_channels=8, heads=(2, 4),
                      windows=((4, 4, 4), (4, 4, 4)), mlp_ratio=1.0, num_classes=5,
                      input_shape=(32, 32, 32), downsample_count=3),
    "tiny": dict(n1=1, n2=1, m1=2, m2=2, base_channels=4, heads=(1,), windows=((4, 4, 4),),
                 mlp_ratio=1.0, num_classes=2, input_shape=(8, 8, 8), downsample_count=1),
}


def preset(name: str, **overrides) -> PHTransConfig:
    """Named configuration; keyword overrides replace individual fields."""
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return PHTransConfig(**{**_PRESETS[name], **overrides}).validate()


def preset_names() -> list[str]:
    return sorted(_PRESETS)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class STBlock(Module):
    """LN -> (shifted-)window MSA -> residual, LN -> MLP -> residual."""

    def __init__(self, channels, heads, window, shift, mlp_ratio, position_bias):
        self.norm1 = LayerNorm(channels)
        self.attn = WindowAttention(channels, heads, window, position_bias)
        self.norm2 = LayerNorm(channels)
        self.mlp = MLPBlock(channels, mlp_ratio)
        self.shift = tuple(shift)

    def forward(self, seq, mask=None):
        return st_block(seq, self, mask)


def st_block(seq: Tensor, block: STBlock, mask: np.ndarray | None = None) -> Tensor:
    seq = seq + window_msa(block.norm1(seq), block.attn, mask)
    return seq + block.mlp(block.norm2(seq))


class SwinStack(Module):
    """``m1`` ST blocks alternating regular and half-window-shifted partitions."""

    def __init__(self, channels, heads, window, depth, mlp_ratio, position_bias, spatial):
        self.window = tuple(window)
        self.spatial = tuple(spatial)
        half = tuple(w // 2 for w in self.window)
        self.blocks = [
            STBlock(channels, heads, self.window, (0, 0, 0) if i % 2 == 0 else half, mlp_ratio, position_bias)
            for i in range(depth)
        ]
        self._masks = {}

    def mask_for(self, shift):
        if shift not in self._masks:
            self._masks[shift] = shift_mask(self.spatial, self.window, shift) if any(shift) else None
        return self._masks[shift]

    def forward(self, x: Tensor) -> Tensor:
        if not self.blocks:
            return x
        vshape = x.shape
        seq = v2s(x, self.window)
        for blk in self.blocks:
            if any(blk.shift):
                neg = tuple(-s for s in blk.shift)
                seq = v2s(tc.cyclic_roll(s2v(seq, self.window, vshape), neg), self.window)
                seq = blk(seq, self.mask_for(blk.shift))
                seq = v2s(tc.cyclic_roll(s2v(seq, self.window, vshape), blk.shift), self.window)
            else:
                seq = blk(seq)
        return s2v(seq, self.window, vshape)


class ConvStack(Module):
    def __init__(self, cin, cout, depth, first_stride=1):
        self.units = [ConvUnit(cin if i == 0 else cout, cout, first_stride if i == 0 else 1) for i in range(depth)]

    def forward(self, x):
        for u in self.units:
            x = u(x)
        return x


class TransConvEncoder(Module):
    """y = S2V(ST^m1(V2S(x))) + Conv^m2(x)."""

    def __init__(self, channels, heads, window, m1, m2, mlp_ratio, position_bias, spatial):
        self.swin = SwinStack(channels, heads, window, m1, mlp_ratio, position_bias, spatial)
        self.conv = ConvStack(channels, channels, m2)

    def forward(self, x):
        return self.swin(x) + self.conv(x)


class TransConvDecoder(Module):
    """z = S2V(ST^m1(V2S(x_up + y_skip))) + Conv^m2([x_up, y_skip])."""

    def __init__(self, channels, heads, window, m1, m2, mlp_ratio, position_bias, spatial):
        self.swin = SwinStack(channels, heads, window, m1, mlp_ratio, position_bias, spatial)
        self.conv = ConvStack(2 * channels, channels, m2)

    def forward(self, x_up, y_skip):
        if x_up.shape != y_skip.shape:
            raise ValueError(f"decoder skip shape {y_skip.shape} does not match upsampled {x_up.shape}")
        return self.swin(x_up + y_skip) + self.conv(tc.concat_channels(x_up, y_skip))


class Downsample(Module):
    """Stride-2 convolution doubling channels, then instance norm."""

    def __init__(self, cin, cout, kernel=3):
        self.conv = Conv3d(cin, cout, kernel, 2, (kernel - 1) // 2)
        self.norm = InstanceNorm(cout)

    def forward(self, x):
        if any(n % 2 for n in x.shape[2:]):
            raise ValueError(f"downsample needs even spatial extents, got {x.shape[2:]}")
        return self.norm(self.conv(x))


class Upsample(Module):
    """Stride-2 transposed convolution halving channels, then instance norm."""

    def __init__(self, cin, cout):
        self.conv = ConvTranspose3d(cin, cout, 2, 2)
        self.norm = InstanceNorm(cout)

    def forward(self, x):
        return self.norm(self.conv(x))


class PurePipe(Module):
    """Decoder-side pure conv stage: concat skip, then ``depth`` conv units."""

    def __init__(self, channels, depth):
        self.conv = ConvStack(2 * channels, channels, depth)

    def forward(self, x_up, y_skip):
        return self.conv(tc.concat_channels(x_up, y_skip))


class PHTransModel(Module):
    def __init__(self, config: PHTransConfig):
        cfg = config.validate()
        self.config = cfg
        S = cfg.num_stages
        enc = []
        down = []
        for s in range(S):
            c = cfg.channels(s)
            if s == 0:
                down.append(None)
                enc.append(ConvStack(cfg.in_channels, c, 2))
            elif not cfg.hybrid(s):
                down.append(None)
                enc.append(ConvStack(cfg.channels(s - 1), c, 2, first_stride=2))
            else:
                down.append(Downsample(cfg.channels(s - 1), c, cfg.downsample_kernel))
                i = s - cfg.n1
                enc.append(TransConvEncoder(c, cfg.heads[i], cfg.windows[i], cfg.m1, cfg.m2,
                                            cfg.mlp_ratio, cfg.position_bias, cfg.stage_shape(s)))
        self.down = [d for d in down if d is not None]
        self._down_at = {s: d for s, d in enumerate(down) if d is not None}
        self.encoder = enc
        self.up = [Upsample(cfg.channels(s + 1), cfg.channels(s)) for s in range(S - 1)]
        dec = []
        for s in range(S - 1):
            c = cfg.channels(s)
            if cfg.hybrid(s):
                i = s - cfg.n1
                dec.append(TransConvDecoder(c, cfg.heads[i], cfg.windows[i], cfg.m1, cfg.m2,
                                            cfg.mlp_ratio, cfg.position_bias, cfg.stage_shape(s)))
            else:
                dec.append(PurePipe(c, 2))
        self.decoder = dec
        self.heads = [Conv3d(cfg.channels(s), cfg.num_classes, 1, 1, 0) for s in range(S)]
        he_init(self, cfg.seed)

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        for s, stage in enumerate(self.encoder):
            if s in self._down_at:
                x = self._down_at[s](x)
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: Tensor, deep_supervision: bool = True) -> list[Tensor]:
        """Logit maps ordered coarsest to finest (one per stage)."""
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.input_shape:
            raise ValueError(
                f"input shape {x.shape} does not match config (B, {cfg.in_channels}, {cfg.input_shape})"
            )
        feats = self.encode(x)
        S = cfg.num_stages
        z = feats[-1]
        outs = [self.heads[S - 1](z)] if deep_supervision else []
        for s in range(S - 2, -1, -1):
            z = self.decoder[s](self.up[s](z), feats[s])
            if deep_supervision or s == 0:
                outs.append(self.heads[s](z))
        return outs

    def predict_logits(self, x: Tensor) -> np.ndarray:
        with tc.no_grad():
            return self.forward(x, deep_supervision=False)[-1].data


def phtrans_forward(model: PHTransModel, x: Tensor) -> list[Tensor]:
    return model.forward(x)


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_breakdown(model: Module, depth: int = 2) -> dict[str, int]:
    """Parameter counts grouped by the first ``depth`` components of each name."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + p.size
    return out


def zero_output_projections(model: Module) -> None:
    """Zero every attention output projection and second MLP layer (residual identity)."""
    for blk in _iter_modules(model):
        if isinstance(blk, STBlock):
            for p in (blk.attn.proj.weight, blk.attn.proj.bias, blk.mlp.fc2.weight, blk.mlp.fc2.bias):
                p.data[...] = 0.0


def _iter_modules(m: Module):
    yield m
    for v in vars(m).values():
        if isinstance(v, Module):
            yield from _iter_modules(v)
        elif isinstance(v, (list, tuple)):
            for item in v:
                if isinstance(item, Module):
                    yield from _iter_modules(item)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------
# "PHTR" | u32 version | u32 len + JSON (config, meta) | u32 count |
# per tensor: u16 name len, name, u8 dtype code, u8 ndim, u32 dims, LE payload

MAGIC = b"PHTR"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def write_tensors(path, header: dict, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(hdr)) + hdr
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _CODES:
            raise ValueError(f"cannot serialize dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BB", _CODES[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    off = 12
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
        tensors.append((name, arr))
    return header, tensors


def save_checkpoint(path, model: PHTransModel, meta: dict | None = None) -> None:
    header = {"config": dataclasses.asdict(model.config), "meta": meta or {}}
    write_tensors(path, header, [(n, p.data) for n, p in model.named_parameters()])


def load_checkpoint(path) -> tuple[PHTransModel, dict]:
    header, tensors = read_tensors(path)
    model = PHTransModel(PHTransConfig.from_dict(header["config"]))
    params = dict(model.named_parameters())
    names = [n for n, _ in tensors]
    if set(names) != set(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise ValueError(f"{path}: checkpoint/config mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in tensors:
        p = params[name]
        if p.shape != arr.shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(p.dtype, copy=False)
    return model, header.get("meta", {})
