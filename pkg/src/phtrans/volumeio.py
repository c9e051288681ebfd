"""Volume I/O and preprocessing: NIfTI-1 subset, reorientation, resampling, z-score."""

from __future__ import annotations

import dataclasses
import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    kind: str = "image"  # "image" | "label"
    header: bytes | None = field(default=None, repr=False)
    extra: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag(list(self.spacing) + [1.0])
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.kind not in ("image", "label"):
            raise ValueError(f"kind must be 'image' or 'label', got {self.kind!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace(self, **changes) -> "Volume":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# NIfTI-1 (single file, little endian, uint8/int16/float32)
# ---------------------------------------------------------------------------

HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_NIFTI_CODES = {v: k for k, v in _NIFTI_DTYPES.items()}


class NiftiError(ValueError):
    pass


def _quaternion_affine(b, c, d, qfac, pixdim, offset) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    if a2 <= 1e-7:
        n = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / n, c / n, d / n
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    zooms = np.array([pixdim[0], pixdim[1], pixdim[2] * (-1.0 if qfac < 0 else 1.0)])
    aff = np.eye(4)
    aff[:3, :3] = R * zooms
    aff[:3, 3] = offset
    return aff


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        if "w" in mode:
            return gzip.GzipFile(path, mode, mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path, kind: str = "auto") -> Volume:
    """Parse a single-file NIfTI-1 volume.

    ``kind="auto"`` treats unscaled non-negative integer data below 256 as a
    label map and everything else as an image.
    """
    path = Path(path)
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = raw[:HEADER_SIZE]
    if struct.unpack_from("<i", hdr, 0)[0] != HEADER_SIZE:
        raise NiftiError(f"{path}: sizeof_hdr is not 348 (big endian or not NIfTI-1)")
    if hdr[344:348] != b"n+1\0":
        raise NiftiError(f"{path}: bad magic {hdr[344:348]!r}; only single-file n+1 is supported")
    dim = struct.unpack_from("<8h", hdr, 40)
    if dim[0] != 3:
        raise NiftiError(f"{path}: dim[0] = {dim[0]}, expected a 3D volume")
    datatype = struct.unpack_from("<h", hdr, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", hdr, 76)
    vox_offset = int(struct.unpack_from("<f", hdr, 108)[0])
    slope, inter = struct.unpack_from("<2f", hdr, 112)
    qform_code, sform_code = struct.unpack_from("<2h", hdr, 252)
    if sform_code > 0:
        srow = np.array(struct.unpack_from("<12f", hdr, 280), dtype=np.float64).reshape(3, 4)
        affine = np.vstack([srow, [0, 0, 0, 1]])
    elif qform_code > 0:
        b, c, d, qx, qy, qz = struct.unpack_from("<6f", hdr, 256)
        affine = _quaternion_affine(b, c, d, pixdim[0], pixdim[1:4], (qx, qy, qz))
    else:
        raise NiftiError(f"{path}: neither sform nor qform is set")
    shape = tuple(int(n) for n in dim[1:4])
    dt = _NIFTI_DTYPES[datatype]
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset).reshape(shape, order="F")
    data = data.astype(dt.newbyteorder("="))
    if slope not in (0.0,) and not (slope == 1.0 and inter == 0.0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    if kind == "auto":
        small_ints = data.dtype.kind in "iu" and data.size and data.min() >= 0 and data.max() < 256
        kind = "label" if small_ints else "image"
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    return Volume(data=data, spacing=spacing, affine=affine, kind=kind, header=hdr,
                  extra=raw[HEADER_SIZE:vox_offset])


def _blank_header() -> bytearray:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38:39] = b"r"
    hdr[344:348] = b"n+1\0"
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    return hdr


def write_nifti(path, v: Volume) -> None:
    path = Path(path)
    hdr = bytearray(v.header) if v.header is not None else _blank_header()
    extra = v.extra if v.extra else b"\0\0\0\0"
    slope, inter = struct.unpack_from("<2f", hdr, 112)
    scaled = slope not in (0.0,) and not (slope == 1.0 and inter == 0.0)
    data = v.data
    if scaled:
        stored_dt = _NIFTI_DTYPES[struct.unpack_from("<h", hdr, 70)[0]]
        data = (data.astype(np.float64) - inter) / slope
        if stored_dt.kind in "iu":
            data = np.rint(data)
        data = data.astype(stored_dt)
    else:
        data = _storage_array(data, v.kind)
    dt = data.dtype.newbyteorder("<")
    code = _NIFTI_CODES.get(dt)
    if code is None:
        raise NiftiError(f"cannot write dtype {data.dtype}; supported: uint8, int16, float32")
    dim = [3, *data.shape, 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, code, dt.itemsize * 8)
    pixdim = list(struct.unpack_from("<8f", hdr, 76))
    pixdim[0] = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
    pixdim[1:4] = v.spacing
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + len(extra)))
    if struct.unpack_from("<h", hdr, 254)[0] <= 0:
        struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<12f", hdr, 280, *v.affine[:3].reshape(-1))
    payload = np.asarray(data, dtype=dt).tobytes(order="F")
    with _open(path, "wb") as fh:
        fh.write(bytes(hdr) + extra + payload)


def _storage_array(data: np.ndarray, kind: str) -> np.ndarray:
    if data.dtype in (np.uint8, np.int16, np.float32):
        return data
    if kind == "label" or data.dtype.kind in "iub":
        if data.min(initial=0) >= 0 and data.max(initial=0) < 256:
            return data.astype(np.uint8)
        return data.astype(np.int16)
    return data.astype(np.float32)


# internal raw + JSON sidecar format -----------------------------------------

def write_raw(path, v: Volume) -> None:
    """``path`` gets the JSON header; the payload goes to ``path`` with suffix ``.raw``."""
    path = Path(path)
    data = _storage_array(v.data, v.kind)
    meta = {"shape": list(data.shape), "spacing": list(v.spacing), "dtype": data.dtype.str,
            "kind": v.kind, "orientation": v.affine.tolist()}
    path.write_text(json.dumps(meta, indent=1), encoding="utf-8")
    path.with_suffix(".raw").write_bytes(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes())


def read_raw(path) -> Volume:
    path = Path(path)
    meta = json.loads(path.read_text(encoding="utf-8"))
    dt = np.dtype(meta["dtype"]).newbyteorder("<")
    data = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=dt).reshape(meta["shape"])
    return Volume(data=data.astype(dt.newbyteorder("=")), spacing=tuple(meta["spacing"]),
                  affine=np.array(meta["orientation"]), kind=meta["kind"])


def read_volume(path, kind: str = "auto") -> Volume:
    p = str(path)
    if p.endswith(".json"):
        v = read_raw(path)
        return v if kind == "auto" else v.replace(kind=kind)
    return read_nifti(path, kind)


def write_volume(path, v: Volume) -> None:
    if str(path).endswith(".json"):
        write_raw(path, v)
    else:
        write_nifti(path, v)


# ---------------------------------------------------------------------------
# orientation
# ---------------------------------------------------------------------------

def axis_orientation(affine: np.ndarray) -> list[tuple[int, int]]:
    """Per array axis, the (world axis, sign) it is closest to."""
    A = np.asarray(affine, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("orientation matrix is singular")
    mag = np.abs(A / np.linalg.norm(A, axis=0, keepdims=True))
    result: list[tuple[int, int] | None] = [None] * 3
    used_world, used_axis = set(), set()
    for flat in np.argsort(-mag, axis=None):
        world, axis = divmod(int(flat), 3)
        if world in used_world or axis in used_axis:
            continue
        result[axis] = (world, 1 if A[world, axis] > 0 else -1)
        used_world.add(world)
        used_axis.add(axis)
    return result  # type: ignore[return-value]


def _apply_orientation(data: np.ndarray, affine: np.ndarray, spacing, ornt) -> tuple[np.ndarray, np.ndarray, tuple]:
    perm = [0, 0, 0]
    for axis, (world, _) in enumerate(ornt):
        perm[world] = axis
    out = np.transpose(data, perm)
    shape_old = data.shape
    M = np.zeros((4, 4))
    M[3, 3] = 1.0
    for new_axis, old_axis in enumerate(perm):
        sign = ornt[old_axis][1]
        if sign < 0:
            out = np.flip(out, axis=new_axis)
            M[old_axis, new_axis] = -1.0
            M[old_axis, 3] = shape_old[old_axis] - 1
        else:
            M[old_axis, new_axis] = 1.0
    new_spacing = tuple(spacing[p] for p in perm)
    return np.ascontiguousarray(out), affine @ M, new_spacing


def reorient_canonical(v: Volume) -> Volume:
    """Permute/flip axes so array axis i runs along +world axis i (no interpolation)."""
    ornt = axis_orientation(v.affine)
    data, affine, spacing = _apply_orientation(v.data, v.affine, v.spacing, ornt)
    return Volume(data=data, spacing=spacing, affine=affine, kind=v.kind)


def restore_orientation(data: np.ndarray, original_affine: np.ndarray) -> np.ndarray:
    """Map an array in canonical layout back to the layout described by ``original_affine``."""
    ornt = axis_orientation(original_affine)
    out = data
    perm = [0, 0, 0]
    for axis, (world, _) in enumerate(ornt):
        perm[world] = axis
    for new_axis, old_axis in enumerate(perm):
        if ornt[old_axis][1] < 0:
            out = np.flip(out, axis=new_axis)
    return np.ascontiguousarray(np.transpose(out, np.argsort(perm)))


# ---------------------------------------------------------------------------
# resampling and intensity preprocessing
# ---------------------------------------------------------------------------

def source_coords(n_src: int, n_dst: int) -> np.ndarray:
    """Voxel-centre mapping (align_corners=False) of destination indices into the source."""
    return (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5


def resample_array(arr: np.ndarray, shape: Sequence[int], mode: str = "trilinear") -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"target shape must be positive, got {shape}")
    if tuple(arr.shape) == shape:
        return arr.copy()
    if mode == "nearest":
        idx = [np.minimum(np.floor((np.arange(t) + 0.5) * (s / t)).astype(np.int64), s - 1)
               for s, t in zip(arr.shape, shape)]
        return arr[np.ix_(*idx)]
    if mode != "trilinear":
        raise ValueError(f"unknown resampling mode {mode!r}")
    out = arr.astype(np.float64)
    for axis, (s, t) in enumerate(zip(arr.shape, shape)):
        if s == t:
            continue
        c = np.clip(source_coords(s, t), 0, s - 1)
        i0 = np.floor(c).astype(np.int64)
        i1 = np.minimum(i0 + 1, s - 1)
        w = (c - i0).reshape([-1 if a == axis else 1 for a in range(out.ndim)])
        out = np.take(out, i0, axis=axis) * (1 - w) + np.take(out, i1, axis=axis) * w
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def resample(v: Volume, target_shape: Sequence[int], mode: str | None = None) -> Volume:
    """Resample to ``target_shape``; images trilinear by default, labels nearest."""
    mode = mode or ("nearest" if v.kind == "label" else "trilinear")
    if v.kind == "label" and mode == "trilinear":
        raise ValueError("trilinear interpolation of a label volume is not allowed; use nearest")
    target_shape = tuple(int(s) for s in target_shape)
    data = resample_array(v.data, target_shape, mode)
    scale = np.array(v.shape, dtype=np.float64) / np.array(target_shape, dtype=np.float64)
    M = np.diag(list(scale) + [1.0])
    M[:3, 3] = 0.5 * scale - 0.5
    spacing = tuple(float(s) * float(r) for s, r in zip(v.spacing, scale))
    return Volume(data=data, spacing=spacing, affine=v.affine @ M, kind=v.kind)


def zscore(v: Volume | np.ndarray, eps: float = 1e-8, clip: tuple[float, float] | None = None):
    """(x - mean) / std over the whole volume; constant volumes map to zeros."""
    arr = v.data if isinstance(v, Volume) else v
    x = arr.astype(np.float64)
    if clip is not None:
        x = np.clip(x, *clip)
    std = x.std()
    out = np.zeros_like(x) if std < eps else (x - x.mean()) / std
    out = out.astype(np.float32)
    if isinstance(v, Volume):
        if v.kind != "image":
            raise ValueError("zscore applies to image volumes only")
        return Volume(data=out, spacing=v.spacing, affine=v.affine, kind="image")
    return out


def binarize_labels(v: Volume | np.ndarray):
    """0 stays 0; every organ label becomes 1."""
    arr = v.data if isinstance(v, Volume) else v
    if arr.min(initial=0) < 0:
        raise ValueError("label volume contains negative values")
    out = (arr >= 1).astype(np.uint8)
    if isinstance(v, Volume):
        return Volume(data=out, spacing=v.spacing, affine=v.affine, kind="label")
    return out


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    organs: list[Ellipsoid] = field(default_factory=list)  # label k+1 for organs[k]
    body: Ellipsoid | None = None
    noise: float = 0.1
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_scale: float = 1.0
    intensity_offset: float = 0.0
    affine_flips: tuple[bool, bool, bool] = (False, False, False)

    @property
    def num_classes(self) -> int:
        return len(self.organs)

    def validate(self) -> "PhantomSpec":
        for k, e in enumerate(self.organs):
            for c, r, n in zip(e.center, e.radii, self.shape):
                if c - r < 0 or c + r > n - 1:
                    raise ValueError(f"organ {k + 1} ellipsoid {e} leaves the {self.shape} grid")
        return self


def _ellipsoid_mask(shape, e: Ellipsoid) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / rad) ** 2 for g, c, rad in zip(grids, e.center, e.radii))
    return r <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Ellipsoid organs on a noisy body; earlier organs win where ellipsoids overlap."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    label = np.zeros(spec.shape, dtype=np.uint8)
    image = np.zeros(spec.shape, dtype=np.float64)
    if spec.body is not None:
        image[_ellipsoid_mask(spec.shape, spec.body)] = spec.body.intensity
    for k, e in enumerate(spec.organs):
        m = _ellipsoid_mask(spec.shape, e) & (label == 0)
        label[m] = k + 1
        image[m] = e.intensity
    image += rng.normal(0.0, spec.noise, spec.shape)
    image = (image * spec.intensity_scale + spec.intensity_offset).astype(np.float32)
    affine = np.diag(list(spec.spacing) + [1.0])
    data_img, data_lab = image, label
    for axis, flip in enumerate(spec.affine_flips):
        if flip:
            data_img = np.flip(data_img, axis)
            data_lab = np.flip(data_lab, axis)
            affine[axis, axis] = -spec.spacing[axis]
            affine[axis, 3] = spec.spacing[axis] * (spec.shape[axis] - 1)
    img = Volume(np.ascontiguousarray(data_img), spec.spacing, affine.copy(), "image")
    lab = Volume(np.ascontiguousarray(data_lab), spec.spacing, affine.copy(), "label")
    return img, lab


# organ name, offset from body centre, radii, intensity (canonical frame, 64^3)
_ORGAN_LAYOUT = [
    ("liver", (-6.0, 7.0, 1.0), (11.0, 12.0, 9.0), 1.0),
    ("right kidney", (10.0, -8.0, -5.0), (6.0, 5.5, 7.0), 1.8),
    ("spleen", (9.0, 9.0, 5.0), (6.5, 7.0, 6.0), 0.55),
    ("pancreas", (-7.0, -9.0, 6.0), (5.0, 9.0, 5.0), 1.4),
]


def random_phantom_spec(seed: int, shape=(64, 64, 64), num_organs: int = 4, noise: float = 0.15) -> PhantomSpec:
    """Abdomen-like layout with per-case jitter in position, size, contrast and orientation."""
    rng = np.random.default_rng(seed)
    scale = np.array(shape) / 64.0
    centre = np.array(shape) / 2.0 - 0.5 + rng.uniform(-5, 5, 3) * scale
    body = Ellipsoid(tuple(centre), tuple(np.array([27.0, 24.0, 22.0]) * scale * rng.uniform(0.95, 1.05, 3)), 0.3)
    organs = []
    for name, off, radii, inten in _ORGAN_LAYOUT[:num_organs]:
        c = centre + (np.array(off) + rng.uniform(-2.5, 2.5, 3)) * scale
        r = np.array(radii) * scale * rng.uniform(0.85, 1.15, 3)
        c = np.clip(c, r + 0.5, np.array(shape) - 1.5 - r)
        organs.append(Ellipsoid(tuple(c), tuple(r), inten * rng.uniform(0.92, 1.08)))
    flips = tuple(bool(b) for b in rng.integers(0, 2, 3))
    return PhantomSpec(shape=tuple(shape), organs=organs, body=body, noise=noise, seed=seed,
                       intensity_scale=float(rng.uniform(200, 400)), intensity_offset=float(rng.uniform(-900, -700)),
                       affine_flips=flips)
