"""Slow, independent reference implementations used to check the library.

Nothing here imports the code under test except for plain data containers.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------

def neighbour_offsets(connectivity: int):
    offs = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        n = sum(abs(v) for v in d)
        if n == 0:
            continue
        if (connectivity == 6 and n == 1) or (connectivity == 18 and n <= 2) or connectivity == 26:
            offs.append(d)
    return offs


def flood_fill(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Breadth-first labelling; components numbered by their first voxel in C order."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=np.int64)
    offs = neighbour_offsets(connectivity)
    shape = mask.shape
    nxt = 0
    for start in zip(*np.nonzero(mask)):
        if out[start]:
            continue
        nxt += 1
        out[start] = nxt
        q = deque([start])
        while q:
            z, y, x = q.popleft()
            for dz, dy, dx in offs:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= c < n for c, n in zip(p, shape)) and mask[p] and not out[p]:
                    out[p] = nxt
                    q.append(p)
    return out


# ---------------------------------------------------------------------------
# DSC / NSD
# ---------------------------------------------------------------------------

def dsc_count(pred, gt) -> float:
    P = {tuple(p) for p in np.argwhere(pred)}
    G = {tuple(p) for p in np.argwhere(gt)}
    if not P and not G:
        return 1.0
    return 2 * len(P & G) / (len(P) + len(G))


def surface_points(mask: np.ndarray) -> list[tuple[int, int, int]]:
    mask = np.asarray(mask, dtype=bool)
    pts = []
    for p in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                q = list(p)
                q[axis] += step
                if not 0 <= q[axis] < mask.shape[axis] or not mask[tuple(q)]:
                    pts.append(tuple(int(v) for v in p))
                    break
            else:
                continue
            break
    return pts


def nsd_exhaustive(pred, gt, spacing, tau) -> float:
    sp_, sg = surface_points(pred), surface_points(gt)
    if not sp_ and not sg:
        return 1.0
    if not sp_ or not sg:
        return 0.0
    spacing = [float(s) for s in spacing]

    def within(a, others):
        best = min(sum(((u - v) * s) ** 2 for u, v, s in zip(a, b, spacing)) for b in others)
        return best <= tau * tau * (1 + 1e-9)

    hits = sum(within(a, sg) for a in sp_) + sum(within(b, sp_) for b in sg)
    return hits / (len(sp_) + len(sg))


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def trilinear_direct(arr: np.ndarray, shape) -> np.ndarray:
    """Per-voxel trilinear interpolation at voxel-centre-mapped coordinates."""
    src = arr.shape
    out = np.zeros(shape, dtype=np.float64)
    for idx in itertools.product(*[range(n) for n in shape]):
        coord = []
        for i, s, t in zip(idx, src, shape):
            c = (i + 0.5) * s / t - 0.5
            coord.append(min(max(c, 0.0), s - 1.0))
        lo = [int(math.floor(c)) for c in coord]
        fr = [c - l for c, l in zip(coord, lo)]
        acc = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            w = 1.0
            pos = []
            for c, l, f, n in zip(corner, lo, fr, src):
                w *= f if c else 1.0 - f
                pos.append(min(l + c, n - 1))
            acc += w * float(arr[tuple(pos)])
        out[idx] = acc
    return out


# ---------------------------------------------------------------------------
# shifted-window attention
# ---------------------------------------------------------------------------

def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x, approximate="tanh"):
    if approximate == "erf":
        from scipy.special import erf
        return 0.5 * x * (1 + erf(x / math.sqrt(2)))
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def shifted_attention(x, window, shift, heads, w_qkv, b_qkv, w_proj, b_proj, table=None):
    """Masked attention computed token by token on the unrolled volume.

    ``x`` is (C, D, H, W) float64 tokens (already normalized). A token attends to
    every token in the same segment of the shifted partition, where the segment
    index along an axis is floor((p - s) / w) (no wrap-around). Relative position
    bias is looked up by the plain coordinate offset. Returns (C, D, H, W).
    """
    C = x.shape[0]
    spatial = x.shape[1:]
    d = C // heads
    tokens = list(itertools.product(*[range(n) for n in spatial]))
    seg = {p: tuple((c - s) // w for c, s, w in zip(p, shift, window)) for p in tokens}
    feats = {p: x[(slice(None),) + p] for p in tokens}
    qkv = {p: feats[p] @ w_qkv + b_qkv for p in tokens}
    out = np.zeros_like(x)
    d1, d2 = 2 * window[1] - 1, 2 * window[2] - 1
    for p in tokens:
        keys = [q for q in tokens if seg[q] == seg[p]]
        head_out = []
        for h in range(heads):
            qv = qkv[p][h * d:(h + 1) * d]
            scores = []
            for q in keys:
                kv = qkv[q][C + h * d:C + (h + 1) * d]
                sc = float(qv @ kv) / math.sqrt(d)
                if table is not None:
                    r = [a - b + w - 1 for a, b, w in zip(p, q, window)]
                    sc += table[(r[0] * d1 + r[1]) * d2 + r[2], h]
                scores.append(sc)
            scores = np.array(scores)
            wts = np.exp(scores - scores.max())
            wts /= wts.sum()
            vals = np.stack([qkv[q][2 * C + h * d:2 * C + (h + 1) * d] for q in keys])
            head_out.append(wts @ vals)
        out[(slice(None),) + p] = np.concatenate(head_out) @ w_proj + b_proj
    return out


def st_block_reference(x, window, shift, heads, params, approximate="tanh"):
    """Full ST block (LN, attention, residual, LN, MLP, residual) on (C, D, H, W)."""
    C = x.shape[0]
    tok = np.moveaxis(x, 0, -1)
    n1 = np.moveaxis(_layer_norm(tok, params["norm1.gain"], params["norm1.bias"]), -1, 0)
    a = shifted_attention(n1, window, shift, heads, params["attn.qkv.weight"], params["attn.qkv.bias"],
                          params["attn.proj.weight"], params["attn.proj.bias"], params.get("attn.bias_table"))
    y = np.moveaxis(x + a, 0, -1)
    n2 = _layer_norm(y, params["norm2.gain"], params["norm2.bias"])
    hid = _gelu(n2 @ params["mlp.fc1.weight"] + params["mlp.fc1.bias"], approximate)
    y = y + hid @ params["mlp.fc2.weight"] + params["mlp.fc2.bias"]
    assert y.shape[-1] == C
    return np.moveaxis(y, -1, 0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_scalar(p0: float, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0) -> list[float]:
    """Textbook AdamW on one scalar; returns the trajectory after each step."""
    p, m, v = p0, 0.0, 0.0
    traj = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(p)
    return traj


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv3d_direct(x, w, b=None, stride=1, padding=0):
    """Nested-loop cross-correlation, (B,Cin,D,H,W) x (Cout,Cin,k,k,k)."""
    B, Cin, D, H, W = x.shape
    Cout, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    Do = (D + 2 * padding - kd) // stride + 1
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Do, Ho, Wo))
    for i, j, k in itertools.product(range(Do), range(Ho), range(Wo)):
        patch = xp[:, :, i * stride:i * stride + kd, j * stride:j * stride + kh, k * stride:k * stride + kw]
        out[:, :, i, j, k] = np.einsum("bcxyz,ocxyz->bo", patch, w)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def conv_matrix(w, in_shape, stride=1, padding=0):
    """Dense matrix of the (single-sample) convolution acting on flattened input."""
    Cin = w.shape[1]
    n = Cin * int(np.prod(in_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(conv3d_direct(e.reshape(1, Cin, *in_shape), w, None, stride, padding).reshape(-1))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# random instances shared by unit and acceptance tests
# ---------------------------------------------------------------------------

def random_mask(rng, shape=(16, 16, 16), density=None) -> np.ndarray:
    """Blobby binary mask: thresholded box-smoothed noise (pure numpy)."""
    noise = rng.normal(size=shape)
    sm = noise.copy()
    for axis in range(3):
        sm = (np.roll(sm, 1, axis) + sm + np.roll(sm, -1, axis)) / 3
    density = rng.uniform(0.15, 0.6) if density is None else density
    return sm > np.quantile(sm, 1 - density)


def random_mask_pair(rng, shape=(10, 10, 10)):
    a = random_mask(rng, shape)
    mode = rng.integers(4)
    if mode == 0:
        b = random_mask(rng, shape)
    elif mode == 1:
        b = np.roll(a, tuple(int(v) for v in rng.integers(-2, 3, 3)), axis=(0, 1, 2))
    elif mode == 2:
        b = a ^ (rng.random(shape) < 0.05)
    else:
        b = np.zeros(shape, bool) if rng.random() < 0.5 else a.copy()
    return a, b
