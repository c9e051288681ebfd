"""Losses, AdamW, cosine schedule, augmentation, epoch sampling and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import tensorcore as tc
from .architecture import PHTransModel, load_checkpoint, read_tensors, save_checkpoint, write_tensors
from .tensorcore import Tensor
from .volumeio import resample_array

DICE_SMOOTH = 1e-5


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    B, K = logits.shape[:2]
    if labels.shape != (B,) + tuple(logits.shape[2:]):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64, copy=False)


def _one_hot(labels: np.ndarray, K: int, dtype) -> np.ndarray:
    oh = np.zeros((labels.shape[0], K) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(oh, labels[:, None], 1, axis=1)
    return oh


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over voxels of -log softmax(logits)[true class]."""
    labels = _check_labels(logits, labels)
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    true = np.take_along_axis(x, labels[:, None], axis=1)
    n = labels.size
    loss = (np.log(z) + m - true).sum() / n

    def bw(g):
        grad = e / z
        np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1, axis=1)
        return (grad * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean foreground soft Dice, sums taken over batch and space."""
    labels = _check_labels(logits, labels)
    K = logits.shape[1]
    if K < 2:
        raise ValueError("dice_loss needs at least one foreground class")
    p = tc.softmax(logits, axis=1)
    g = _one_hot(labels, K, logits.dtype)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = tc.tsum(p * Tensor(g), axes)
    denom = tc.tsum(p, axes) + Tensor(g.sum(axis=axes))
    dice = (tc.scale(inter, 2.0) + smooth) / (denom + smooth)
    fg = tc.getitem(dice, slice(1, None))
    return 1.0 - tc.mean(fg)


def ce_dice(logits: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    return cross_entropy(logits, labels) + dice_loss(logits, labels, smooth)


def deep_supervision_weights(n: int) -> np.ndarray:
    """Weights proportional to 2^-(n-1-s), normalized; the last (finest) output is heaviest."""
    w = 2.0 ** -np.arange(n - 1, -1, -1, dtype=np.float64)
    return w / w.sum()


def downsample_labels(labels: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    if tuple(labels.shape[1:]) == tuple(shape):
        return labels
    return np.stack([resample_array(l, shape, "nearest") for l in labels])


def deep_supervision_loss(outputs: Sequence[Tensor], labels: np.ndarray, weights: Sequence[float] | None = None,
                          smooth: float = DICE_SMOOTH) -> Tensor:
    """Weighted CE + Dice over outputs ordered coarsest to finest."""
    if not outputs:
        raise ValueError("deep_supervision_loss needs at least one output")
    w = deep_supervision_weights(len(outputs)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(outputs):
        raise ValueError(f"{len(outputs)} outputs but {len(w)} deep-supervision weights")
    total = None
    for out, ws in zip(outputs, w):
        if ws == 0:
            continue
        term = tc.scale(ce_dice(out, downsample_labels(labels, out.shape[2:]), smooth), float(ws))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray | Tensor]) -> "OptimizerState":
        arrs = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], 0)


def adamw_step(params, grads, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adamw_step: params, grads and state have different lengths")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    decay = 1.0 - lr * weight_decay
    for i, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        m, v = state.m[i], state.v[i]
        if data.shape != g.shape or m.shape != data.shape or v.shape != data.shape:
            raise ValueError(f"adamw_step: shape mismatch at parameter {i}: {data.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        data *= decay
        data -= lr * upd


def cosine_lr(epoch: float, total: float, lr_init: float, lr_min: float = 0.0) -> float:
    if total <= 0 or not 0 <= epoch <= total:
        raise ValueError(f"cosine_lr needs 0 <= epoch <= total, got epoch={epoch}, total={total}")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    rotation: bool = True
    scaling: bool = True
    noise: bool = True
    blur: bool = True
    brightness_contrast: bool = True
    gamma: bool = True
    p: float = 0.2  # per-op application probability
    max_rotation_deg: float = 30.0
    scale_range: tuple[float, float] = (0.85, 1.25)
    max_noise_sigma: float = 0.1
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    brightness_range: tuple[float, float] = (0.75, 1.25)
    contrast_range: tuple[float, float] = (0.75, 1.25)
    gamma_range: tuple[float, float] = (0.7, 1.5)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(rotation=False, scaling=False, noise=False, blur=False, brightness_contrast=False, gamma=False)


def _rotation_matrix(angles: np.ndarray) -> np.ndarray:
    out = np.eye(3)
    for axis, a in enumerate(angles):
        c, s = math.cos(a), math.sin(a)
        i, j = [k for k in range(3) if k != axis]
        r = np.eye(3)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        out = r @ out
    return out


def augment(image: np.ndarray, label: np.ndarray, seed, toggles: AugmentConfig | None = None):
    """Random spatial and intensity augmentation; spatial ops are shared with the label."""
    toggles = AugmentConfig() if toggles is None else toggles
    image = np.asarray(image)
    label = np.asarray(label)
    if image.shape != label.shape:
        raise ValueError(f"image {image.shape} and label {label.shape} differ")
    rng = np.random.default_rng(seed)
    # draw every random number unconditionally so toggles do not shift the stream
    u = rng.random(6)
    angles = np.deg2rad(rng.uniform(-toggles.max_rotation_deg, toggles.max_rotation_deg, 3))
    zoom = rng.uniform(*toggles.scale_range)
    sigma_n = rng.uniform(0, toggles.max_noise_sigma)
    noise_seed = int(rng.integers(2**31))
    sigma_b = rng.uniform(*toggles.blur_sigma)
    bright = rng.uniform(*toggles.brightness_range)
    contrast = rng.uniform(*toggles.contrast_range)
    gam = rng.uniform(*toggles.gamma_range)

    do_rot = toggles.rotation and u[0] < toggles.p
    do_scale = toggles.scaling and u[1] < toggles.p
    img = image.astype(np.float32, copy=True)
    lab = label
    if do_rot or do_scale:
        mat = _rotation_matrix(angles) if do_rot else np.eye(3)
        if do_scale:
            mat = mat / zoom  # output -> input coordinates, zoom > 1 enlarges
        centre = (np.asarray(image.shape) - 1) / 2.0
        offset = centre - mat @ centre
        img = ndimage.affine_transform(img, mat, offset, order=1, mode="nearest").astype(np.float32)
        lab = ndimage.affine_transform(label, mat, offset, order=0, mode="nearest")
    if toggles.noise and u[2] < toggles.p:
        img = img + np.random.default_rng(noise_seed).normal(0, sigma_n, img.shape).astype(np.float32)
    if toggles.blur and u[3] < toggles.p:
        img = ndimage.gaussian_filter(img, sigma_b).astype(np.float32)
    if toggles.brightness_contrast and u[4] < toggles.p:
        mu = img.mean()
        img = ((img - mu) * contrast + mu) * bright
    if toggles.gamma and u[5] < toggles.p:
        lo, hi = float(img.min()), float(img.max())
        if hi > lo:
            img = ((img - lo) / (hi - lo)) ** gam * (hi - lo) + lo
    return img.astype(np.float32, copy=False), lab


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def epoch_sampler(labeled: Sequence[str], pseudo: Sequence[str], seed: int, epoch: int,
                  pseudo_per_epoch: int = 450, labeled_per_epoch: int | None = None) -> list[str]:
    """All labeled ids plus a fresh random pseudo subset, shuffled per epoch.

    ``labeled_per_epoch`` (default: len(labeled)) may exceed the labeled count, in
    which case labeled ids are cycled so each appears as evenly as possible.
    """
    if not labeled:
        raise ValueError("epoch_sampler: labeled set is empty")
    rng = np.random.default_rng([seed, epoch])
    n_lab = len(labeled) if labeled_per_epoch is None else labeled_per_epoch
    if n_lab < len(labeled):
        raise ValueError("labeled_per_epoch must cover every labeled case")
    lab = [labeled[i % len(labeled)] for i in range(n_lab)]
    k = min(pseudo_per_epoch, len(pseudo))
    picked = [pseudo[i] for i in rng.choice(len(pseudo), size=k, replace=False)] if k else []
    sel = lab + picked
    order = rng.permutation(len(sel))
    return [sel[i] for i in order]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (32, 32, 32)
    epochs: int = 10
    steps_per_epoch: int | None = None  # None: ceil(cases per epoch / batch_size)
    lr_init: float = 0.01
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    schedule: str = "cosine"  # "cosine" | "constant"
    ds_weights: list[float] | None = None  # None: halving scheme, finest heaviest
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    pseudo_per_epoch: int = 450
    labeled_per_epoch: int | None = None
    dice_smooth: float = DICE_SMOOTH

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.ds_weights is not None:
            w = np.asarray(self.ds_weights, dtype=np.float64)
            if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("deep-supervision weights must be nonnegative and sum to 1")
        return self

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr_init
        return cosine_lr(epoch, self.epochs, self.lr_init, self.lr_min)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augment", None)
        for key in ("patch_size", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        if isinstance(aug, dict):
            aug = dict(aug)
            for k, v in aug.items():
                if isinstance(v, list):
                    aug[k] = tuple(v)
            cfg.augment = AugmentConfig(**aug)
        elif isinstance(aug, AugmentConfig):
            cfg.augment = aug
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (D, H, W) float32, already normalized
    label: np.ndarray  # (D, H, W) integer


@dataclass
class TrainSet:
    labeled: list[Sample]
    pseudo: list[Sample] = field(default_factory=list)

    def lookup(self) -> dict[str, Sample]:
        table = {s.id: s for s in self.labeled + self.pseudo}
        if len(table) != len(self.labeled) + len(self.pseudo):
            raise ValueError("duplicate sample ids in training set")
        return table


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, float, float]]  # (epoch, mean_loss, lr)
    best_loss: float
    best_epoch: int
    steps: int
    seconds: float
    out_dir: Path | None = None


class TrainingDiverged(RuntimeError):
    pass


def _crop_to_patch(img: np.ndarray, lab: np.ndarray, patch: Sequence[int], rng: np.random.Generator):
    if img.shape == tuple(patch):
        return img, lab
    if any(s < p for s, p in zip(img.shape, patch)):
        raise ValueError(f"sample of shape {img.shape} is smaller than patch {tuple(patch)}")
    lo = [int(rng.integers(0, s - p + 1)) for s, p in zip(img.shape, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(lo, patch))
    return img[sl], lab[sl]


def make_batch(samples: Sequence[Sample], cfg: TrainConfig, epoch: int, step: int):
    imgs, labs = [], []
    for slot, s in enumerate(samples):
        ss = np.random.SeedSequence([cfg.seed, epoch, step, slot])
        crop_rng = np.random.default_rng(ss.spawn(1)[0])
        img, lab = _crop_to_patch(s.image, s.label, cfg.patch_size, crop_rng)
        img, lab = augment(img, lab, ss, cfg.augment)
        imgs.append(img)
        labs.append(lab)
    return np.stack(imgs)[:, None].astype(tc.get_default_dtype()), np.stack(labs).astype(np.int64)


def train_step(model: PHTransModel, state: OptimizerState, x: np.ndarray, y: np.ndarray, lr: float,
               cfg: TrainConfig) -> float:
    model.zero_grad()
    outs = model.forward(Tensor(x))
    loss = deep_supervision_loss(outs, y, cfg.ds_weights, cfg.dice_smooth)
    value = float(loss.item())
    if not math.isfinite(value):
        return value
    tc.backward(loss)
    params = model.parameters()
    adamw_step(params, [p.grad for p in params], state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return value


def _save_state(path: Path, state: OptimizerState, progress: dict) -> None:
    tensors = [(f"m.{i}", m) for i, m in enumerate(state.m)] + [(f"v.{i}", v) for i, v in enumerate(state.v)]
    write_tensors(path, {"step": state.step, "progress": progress}, tensors)


def _load_state(path: Path) -> tuple[OptimizerState, dict]:
    header, tensors = read_tensors(path)
    arrs = dict(tensors)
    n = sum(1 for k in arrs if k.startswith("m."))
    state = OptimizerState([arrs[f"m.{i}"] for i in range(n)], [arrs[f"v.{i}"] for i in range(n)], header["step"])
    return state, header["progress"]


def train(model: PHTransModel, dataset: TrainSet, config: TrainConfig, out_dir=None, resume: bool = False,
          log: Callable[[str], None] | None = None, max_epochs: int | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs of sample -> augment -> forward -> loss -> backward -> AdamW.

    With ``out_dir`` set, writes best.ckpt, last.ckpt, last.state and loss_curve.csv.
    ``resume`` continues from last.state. ``max_epochs`` stops early (used to test resuming).
    """
    cfg = config.validate()
    if tuple(model.config.input_shape) != tuple(cfg.patch_size):
        raise ValueError(f"model input {model.config.input_shape} != patch size {cfg.patch_size}")
    table = dataset.lookup()
    lab_ids = [s.id for s in dataset.labeled]
    ps_ids = [s.id for s in dataset.pseudo]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)

    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    curve: list[tuple[int, float, float]] = []
    best, best_epoch, start = math.inf, -1, 0
    if resume:
        if out is None or not (out / "last.state").exists():
            raise FileNotFoundError("resume requested but no last.state found")
        loaded, _ = load_checkpoint(out / "last.ckpt")
        for p, q in zip(params, loaded.parameters()):
            p.data[...] = q.data
        state, prog = _load_state(out / "last.state")
        curve = [tuple(r) for r in prog["curve"]]
        best, best_epoch, start = prog["best"], prog["best_epoch"], prog["epoch"] + 1
        say(f"resumed at epoch {start} (step {state.step})")

    t0 = time.perf_counter()
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, start + max_epochs)
    for epoch in range(start, stop):
        lr = cfg.lr_at(epoch)
        ids = epoch_sampler(lab_ids, ps_ids, cfg.seed, epoch, cfg.pseudo_per_epoch, cfg.labeled_per_epoch)
        n_steps = cfg.steps_per_epoch or math.ceil(len(ids) / cfg.batch_size)
        losses = []
        for step in range(n_steps):
            batch_ids = [ids[(step * cfg.batch_size + j) % len(ids)] for j in range(cfg.batch_size)]
            x, y = make_batch([table[i] for i in batch_ids], cfg, epoch, step)
            value = train_step(model, state, x, y, lr, cfg)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {step} "
                    f"(global step {state.step + 1}), lr={lr:.6g}, batch={batch_ids}"
                )
            losses.append(value)
        mean_loss = float(np.mean(losses))
        curve.append((epoch, mean_loss, lr))
        say(f"epoch {epoch + 1}/{cfg.epochs} loss {mean_loss:.4f} lr {lr:.3g}")
        if out is not None:
            meta = {"epoch": epoch, "loss": mean_loss, "train_config": cfg.to_dict()}
            if mean_loss < best:
                save_checkpoint(out / "best.ckpt", model, meta)
            save_checkpoint(out / "last.ckpt", model, meta)
        if mean_loss < best:
            best, best_epoch = mean_loss, epoch
        if out is not None:
            _save_state(out / "last.state", state,
                        {"epoch": epoch, "curve": curve, "best": best, "best_epoch": best_epoch})
            write_loss_curve(out / "loss_curve.csv", curve)
    return TrainResult(curve, best, best_epoch, state.step, time.perf_counter() - t0, out)


def write_loss_curve(path, curve: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in curve:
            w.writerow([epoch, repr(loss), repr(lr)])
