"""Connected-component post-processing, DSC / NSD metrics and result tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volumeio import Volume

# Column order of the per-organ result tables (label index = position + 1).
FLARE_CLASSES = (
    "Liver", "RK", "Spleen", "Pancreas", "Aorta", "IVC", "RAG", "LAG",
    "Gallbladder", "Esophagus", "Stomach", "Duodenum", "LK",
)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x)


@dataclass
class ComponentLabeling:
    ids: np.ndarray  # 0 = background, components numbered 1..n in scan order
    sizes: np.ndarray  # sizes[i] is the voxel count of component i + 1
    connectivity: int = 26

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def _structure(connectivity: int) -> np.ndarray:
    rank = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if rank is None:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, rank)


def connected_components(mask, connectivity: int = 26) -> ComponentLabeling:
    arr = _array(mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("connected_components expects a binary mask")
        arr = arr.astype(bool)
    ids, n = ndimage.label(arr, structure=_structure(connectivity))
    if n == 0:
        return ComponentLabeling(ids.astype(np.int32), np.zeros(0, dtype=np.int64), connectivity)
    # renumber by first voxel in C scan order
    flat = ids.reshape(-1)
    nz = np.flatnonzero(flat)
    _, first = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first])
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    ids = remap[ids]
    sizes = np.bincount(ids.reshape(-1), minlength=n + 1)[1:]
    return ComponentLabeling(ids, sizes, connectivity)


def keep_largest(labelmap, classes: Sequence[int] | None = None, connectivity: int = 26):
    """Per class, keep only its largest connected component (ties: lowest id)."""
    arr = _array(labelmap)
    out = np.array(arr, copy=True)
    if classes is None:
        classes = [int(c) for c in np.unique(arr) if c != 0]
    for c in classes:
        comp = connected_components(arr == c, connectivity)
        if comp.count <= 1:
            continue
        keep = int(np.argmax(comp.sizes)) + 1
        out[(arr == c) & (comp.ids != keep)] = 0
    if isinstance(labelmap, Volume):
        return labelmap.replace(data=out)
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def dsc(pred, gt) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"dsc: shape mismatch {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the mask."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = ndimage.binary_erosion(padded, structure=_structure(6), border_value=0)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def _hits_exhaustive(src: np.ndarray, dst: np.ndarray, sp: np.ndarray, tau2: float) -> int:
    a = src * sp
    b = dst * sp
    chunk = max(1, 4_000_000 // (3 * len(b)))
    hits = 0
    for i in range(0, len(a), chunk):
        diff = a[i:i + chunk, None, :] - b[None, :, :]
        d2 = (diff * diff).sum(-1).min(axis=1)
        hits += int((d2 <= tau2).sum())
    return hits


def _hits_edt(src: np.ndarray, dst_surface: np.ndarray, sp: np.ndarray, tau2: float) -> int:
    _, nearest = ndimage.distance_transform_edt(~dst_surface, sampling=sp, return_indices=True)
    tgt = nearest[(slice(None),) + tuple(src.T)].T
    d2 = (((src - tgt) * sp) ** 2).sum(axis=1)
    return int((d2 <= tau2).sum())


def nsd(pred, gt, spacing=(1.0, 1.0, 1.0), tau: float = 1.0, method: str = "auto") -> float:
    """Normalized surface Dice at tolerance ``tau`` mm.

    ``method`` is "exhaustive" (all surface pairs), "edt" (distance transform)
    or "auto", which picks exhaustive when the pair count is small.
    """
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"nsd: shape mismatch {p.shape} vs {g.shape}")
    if tau <= 0:
        raise ValueError("nsd: tau must be positive")
    sp_, sg = surface_voxels(p), surface_voxels(g)
    pts_p, pts_g = np.argwhere(sp_), np.argwhere(sg)
    n_p, n_g = len(pts_p), len(pts_g)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    sp = np.asarray(spacing, dtype=np.float64)
    tau2 = tau * tau * (1 + 1e-9)
    if method == "auto":
        method = "exhaustive" if n_p * n_g <= 4_000_000 else "edt"
    if method == "exhaustive":
        hits = _hits_exhaustive(pts_p, pts_g, sp, tau2) + _hits_exhaustive(pts_g, pts_p, sp, tau2)
    elif method == "edt":
        hits = _hits_edt(pts_p, sg, sp, tau2) + _hits_edt(pts_g, sp_, sp, tau2)
    else:
        raise ValueError(f"unknown nsd method {method!r}")
    return hits / (n_p + n_g)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class SegmentationReport:
    class_names: list[str]
    case_ids: list[str] = field(default_factory=list)
    dsc: list[list[float]] = field(default_factory=list)  # [case][class]
    nsd: list[list[float]] = field(default_factory=list)

    def class_means(self, metric: str = "dsc") -> list[float]:
        rows = np.asarray(getattr(self, metric), dtype=np.float64)
        if rows.size == 0:
            return [float("nan")] * len(self.class_names)
        return rows.mean(axis=0).tolist()

    def mean(self, metric: str = "dsc") -> float:
        return float(np.mean(self.class_means(metric)))

    def row(self, metric: str = "dsc") -> list[float]:
        return [self.mean(metric)] + self.class_means(metric)

    def to_csv(self, method: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["case", "metric", "Mean", *self.class_names]
        w.writerow(head if method is None else ["method", *head])
        for metric in ("dsc", "nsd"):
            for cid, vals in zip(self.case_ids, getattr(self, metric)):
                row = [cid, metric.upper(), f"{np.mean(vals):.4f}", *(f"{v:.4f}" for v in vals)]
                w.writerow(row if method is None else [method, *row])
            row = ["mean", metric.upper(), *(f"{v:.4f}" for v in self.row(metric))]
            w.writerow(row if method is None else [method, *row])
        return buf.getvalue()


def report(cases, class_names: Sequence[str], spacing=(1.0, 1.0, 1.0), tau: float = 1.0,
           case_ids: Sequence[str] | None = None) -> SegmentationReport:
    """Per-case, per-class DSC and NSD. ``cases`` yields (pred, gt) label maps.

    A case may also be given as (pred, gt, spacing).
    """
    names = list(class_names)
    rep = SegmentationReport(class_names=names)
    for i, case in enumerate(cases):
        pred, gt = _array(case[0]), _array(case[1])
        sp = case[2] if len(case) > 2 else spacing
        top = max(int(pred.max(initial=0)), int(gt.max(initial=0)))
        if top > len(names):
            raise ValueError(f"case {i}: label {top} exceeds the {len(names)} named classes")
        rep.case_ids.append(case_ids[i] if case_ids else str(i))
        rep.dsc.append([dsc(pred == k, gt == k) for k in range(1, len(names) + 1)])
        rep.nsd.append([nsd(pred == k, gt == k, sp, tau) for k in range(1, len(names) + 1)])
    return rep


def format_table(rows: Sequence[tuple[str, Sequence[float]]], class_names: Sequence[str],
                 metric: str = "DSC", width: int = 12) -> str:
    """Fixed-width table: one row per method, Mean first, then one column per class."""
    cols = [f"Mean {metric}", *class_names]
    name_w = max([len("Methods")] + [len(r[0]) for r in rows]) + 2
    lines = ["Methods".ljust(name_w) + "".join(c.rjust(width) for c in cols)]
    lines.append("-" * len(lines[0]))
    for name, vals in rows:
        lines.append(name.ljust(name_w) + "".join(f"{v:.4f}".rjust(width) for v in vals))
    return "\n".join(lines)


def combined_csv(rows: Sequence[tuple[str, Sequence[float]]], class_names: Sequence[str], metric: str = "DSC") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "Mean", *class_names])
    for name, vals in rows:
        w.writerow([name, metric, *(f"{v:.4f}" for v in vals)])
    return buf.getvalue()
