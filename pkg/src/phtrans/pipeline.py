"""Self-training orchestration and two-stage coarse-to-fine inference."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .architecture import PHTransModel, load_checkpoint, preset
from .evalpost import SegmentationReport, combined_csv, format_table, keep_largest, report
from .tensorcore import Tensor
from .trainloss import AugmentConfig, Sample, TrainConfig, TrainSet, train
from .volumeio import (
    Volume,
    binarize_labels,
    generate_phantom,
    random_phantom_spec,
    read_volume,
    reorient_canonical,
    resample_array,
    restore_orientation,
    write_volume,
    zscore,
)

SPLITS = ("labeled", "unlabeled", "pseudo", "val")
PHANTOM_CLASSES = ("Liver", "RK", "Spleen", "Pancreas")
ROW_LABELED = "Two-stage+PHTrans"
ROW_PSEUDO = "Two-stage+PHTrans+PD"


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message starts with the stage tag."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class CaseRecord:
    id: str
    image: str
    split: str
    label: str | None = None
    source: str | None = None  # for pseudo records: id of the unlabeled case


@dataclass
class CaseManifest:
    root: Path
    cases: list[CaseRecord] = field(default_factory=list)

    def validate(self) -> "CaseManifest":
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest case ids are not unique")
        for c in self.cases:
            if c.split not in SPLITS:
                raise ValueError(f"case {c.id}: unknown split {c.split!r}")
            if c.split in ("labeled", "val", "pseudo") and not c.label:
                raise ValueError(f"case {c.id}: split {c.split} requires a label path")
        return self

    def split(self, name: str) -> list[CaseRecord]:
        return [c for c in self.cases if c.split == name]

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> str:
        return json.dumps({"root": str(self.root), "cases": [dataclasses.asdict(c) for c in self.cases]}, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CaseManifest":
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        root = Path(d.get("root") or path.parent)
        if not root.is_absolute():
            root = (path.parent / root).resolve()
        return cls(root, [CaseRecord(**c) for c in d["cases"]]).validate()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    preset: str
    overrides: dict = field(default_factory=dict)

    def build(self) -> PHTransModel:
        return PHTransModel(preset(self.preset, **self.overrides))


@dataclass
class PipelineConfig:
    teacher: ModelSpec
    coarse: ModelSpec
    fine: ModelSpec
    teacher_train: TrainConfig
    coarse_train: TrainConfig
    fine_train: TrainConfig
    roi_margin: float = 0.1
    class_names: tuple[str, ...] = PHANTOM_CLASSES
    nsd_tau: float = 1.0
    ablation: bool = True  # also train the labeled-only students
    # Grid the teacher sees volumes on. None: whole volume resampled to the teacher's input shape.
    # Otherwise it trains on input-shaped patches of this grid and predicts with sliding windows.
    teacher_grid: tuple[int, int, int] | None = None

    @classmethod
    def desk(cls) -> "PipelineConfig":
        """CPU-sized profile used by the phantom experiment."""
        aug = AugmentConfig(p=0.15, max_rotation_deg=15.0, scale_range=(0.9, 1.1))

        def tcfg(patch, epochs, steps, lr, seed):
            return TrainConfig(batch_size=2, patch_size=patch, epochs=epochs, steps_per_epoch=steps,
                               lr_init=lr, augment=dataclasses.replace(aug), seed=seed, pseudo_per_epoch=450)

        return cls(
            teacher=ModelSpec("desk_teacher"),
            coarse=ModelSpec("desk_coarse"),
            fine=ModelSpec("desk_fine"),
            teacher_train=tcfg((32, 32, 32), 90, 10, 3e-3, 1),
            coarse_train=tcfg((16, 16, 16), 20, 10, 3e-3, 2),
            fine_train=tcfg((32, 32, 32), 30, 10, 3e-3, 3),
            teacher_grid=(64, 64, 64),
        )

    @classmethod
    def full(cls) -> "PipelineConfig":
        """Full-size profile: PHTrans-L teacher, PHTrans-S students, 300-epoch schedule."""
        def tcfg(batch, patch):
            return TrainConfig(batch_size=batch, patch_size=patch, epochs=300, lr_init=0.01, pseudo_per_epoch=450)

        return cls(
            teacher=ModelSpec("phtrans_l"),
            coarse=ModelSpec("phtrans_s_coarse"),
            fine=ModelSpec("phtrans_s_fine"),
            teacher_train=tcfg(2, (128, 160, 160)),
            coarse_train=tcfg(64, (64, 64, 64)),
            fine_train=tcfg(4, (96, 192, 192)),
            class_names=("Liver", "RK", "Spleen", "Pancreas", "Aorta", "IVC", "RAG", "LAG",
                         "Gallbladder", "Esophagus", "Stomach", "Duodenum", "LK"),
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Build from a (possibly partial) dict layered over ``base`` (default: desk)."""
        merged = _deep_merge((base or cls.desk()).to_dict(), d)
        kw = dict(merged)
        for key in ("teacher", "coarse", "fine"):
            kw[key] = ModelSpec(**kw[key])
        for key in ("teacher_train", "coarse_train", "fine_train"):
            kw[key] = TrainConfig.from_dict(kw[key])
        kw["class_names"] = tuple(kw["class_names"])
        if kw["teacher_grid"] is not None:
            kw["teacher_grid"] = tuple(int(v) for v in kw["teacher_grid"])
        return cls(**kw)


def _deep_merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if k not in out:
            raise KeyError(f"unknown config key {k!r}")
        if isinstance(v, dict) and isinstance(out[k], dict) and k != "overrides":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

class RunLog:
    """Line-oriented, stage-tagged log written to a file (and optionally echoed)."""

    def __init__(self, path=None, echo: bool = False):
        self.logger = logging.getLogger(f"phtrans.run.{id(self)}")
        self.logger.setLevel(logging.INFO)
        self.logger.propagate = False
        fmt = logging.Formatter("%(asctime)s %(message)s", "%Y-%m-%dT%H:%M:%S")
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            h = logging.FileHandler(self.path, encoding="utf-8")
            h.setFormatter(fmt)
            self.logger.addHandler(h)
        if echo:
            h = logging.StreamHandler()
            h.setFormatter(fmt)
            self.logger.addHandler(h)
        self.lines: list[str] = []

    def __call__(self, stage: str, msg: str) -> None:
        line = f"[{stage}] {msg}"
        self.lines.append(line)
        self.logger.info(line)

    def stage(self, name: str):
        return lambda msg: self(name, msg)

    def close(self) -> None:
        for h in list(self.logger.handlers):
            h.close()
            self.logger.removeHandler(h)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class RoiBox:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    margin: float = 0.0

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty RoiBox {self.lo}..{self.hi}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def scaled(self, src_shape: Sequence[int], dst_shape: Sequence[int]) -> "RoiBox":
        """Map the box from a grid of ``src_shape`` to the same extent on ``dst_shape``."""
        lo, hi = [], []
        for a, b, s, d in zip(self.lo, self.hi, src_shape, dst_shape):
            f = d / s
            lo.append(max(0, int(math.floor(a * f + 1e-9))))
            hi.append(min(d, int(math.ceil(b * f - 1e-9))))
        return RoiBox(tuple(lo), tuple(hi), self.margin)


def bounding_box(mask: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    idx = np.argwhere(mask)
    if idx.size == 0:
        return None
    return tuple(int(v) for v in idx.min(0)), tuple(int(v) + 1 for v in idx.max(0))


def roi_from_coarse(coarse_mask, margin_frac: float = 0.1) -> RoiBox:
    """Foreground bounding box grown by ``margin_frac`` of its extent per side, clamped.

    An empty mask gives the whole volume and a warning.
    """
    m = (coarse_mask.data if isinstance(coarse_mask, Volume) else np.asarray(coarse_mask)) > 0
    bb = bounding_box(m)
    if bb is None:
        warnings.warn("coarse segmentation is empty; using the whole volume as ROI", RuntimeWarning, stacklevel=2)
        return RoiBox((0, 0, 0), tuple(m.shape), margin_frac)
    lo, hi = [], []
    for a, b, n in zip(*bb, m.shape):
        pad = int(math.ceil(margin_frac * (b - a) - 1e-9))
        lo.append(max(0, a - pad))
        hi.append(min(n, b + pad))
    return RoiBox(tuple(lo), tuple(hi), margin_frac)


def prepare_image(data: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return zscore(resample_array(np.asarray(data, dtype=np.float32), shape, "trilinear")).astype(np.float32)


def prepare_label(data: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return resample_array(np.asarray(data), shape, "nearest").astype(np.int64)


def _load(manifest: CaseManifest, rec: CaseRecord, with_label: bool = True):
    img = reorient_canonical(read_volume(manifest.path(rec.image), kind="image"))
    if not with_label:
        return img, None
    if rec.label is None:
        raise PipelineError(f"case {rec.id} has no label")
    lpath = manifest.path(rec.label)
    if not lpath.exists():
        raise PipelineError(f"case {rec.id}: label file {lpath} does not exist (run pseudo-label first)")
    lab = reorient_canonical(read_volume(lpath, kind="label"))
    if lab.shape != img.shape:
        raise PipelineError(f"case {rec.id}: image {img.shape} and label {lab.shape} differ")
    return img, lab


def whole_volume_sample(rec: CaseRecord, img: Volume, lab: Volume, shape, binary: bool = False) -> Sample:
    y = prepare_label(lab.data, shape)
    if binary:
        y = binarize_labels(y).astype(np.int64)
    return Sample(rec.id, prepare_image(img.data, shape), y)


def roi_sample(rec: CaseRecord, img: Volume, lab: Volume, shape, margin: float) -> Sample:
    box = roi_from_coarse(lab.data > 0, margin)
    return Sample(rec.id, prepare_image(img.data[box.slices], shape), prepare_label(lab.data[box.slices], shape))


def build_trainset(manifest: CaseManifest, kind: str, shape, margin: float = 0.1,
                   use_pseudo: bool = True) -> TrainSet:
    """Samples for one role: "teacher" (labeled only), "coarse" (binary) or "fine" (ROI crops)."""
    def make(rec):
        img, lab = _load(manifest, rec)
        if kind == "fine":
            return roi_sample(rec, img, lab, shape, margin)
        return whole_volume_sample(rec, img, lab, shape, binary=(kind == "coarse"))

    labeled = [make(r) for r in manifest.split("labeled")]
    if not labeled:
        raise PipelineError("no labeled cases in manifest")
    pseudo = []
    if kind != "teacher" and use_pseudo:
        pseudo = [make(r) for r in manifest.split("pseudo")]
    return TrainSet(labeled, pseudo)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _as_model(m) -> PHTransModel:
    if isinstance(m, PHTransModel):
        return m
    return load_checkpoint(m)[0]


def train_teacher(manifest: CaseManifest, cfg: PipelineConfig, out_dir, log=None) -> Path:
    """Train the teacher on labeled cases only; returns the checkpoint path."""
    model = cfg.teacher.build()
    data = build_trainset(manifest, "teacher", cfg.teacher_grid or model.config.input_shape)
    train(model, data, cfg.teacher_train, out_dir, log=log)
    return Path(out_dir) / "last.ckpt"


def train_student(manifest: CaseManifest, cfg: PipelineConfig, role: str, out_dir, use_pseudo: bool = True,
                  log=None) -> Path:
    if role not in ("coarse", "fine"):
        raise ValueError(f"unknown student role {role!r}")
    spec, tcfg = (cfg.coarse, cfg.coarse_train) if role == "coarse" else (cfg.fine, cfg.fine_train)
    model = spec.build()
    data = build_trainset(manifest, role, model.config.input_shape, cfg.roi_margin, use_pseudo)
    if not use_pseudo:
        tcfg = dataclasses.replace(tcfg, pseudo_per_epoch=0)
    train(model, data, tcfg, out_dir, log=log)
    return Path(out_dir) / "last.ckpt"


def _window_starts(n: int, w: int, step: int) -> list[int]:
    starts = list(range(0, n - w + 1, step))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def sliding_window_logits(model: PHTransModel, x: np.ndarray, overlap: float = 0.5) -> np.ndarray:
    """Logits [K, *x.shape] averaged over input-shaped windows tiling the volume ``x``."""
    win = model.config.input_shape
    if any(n < w for n, w in zip(x.shape, win)):
        raise ValueError(f"volume {x.shape} is smaller than the model window {win}")
    steps = [max(1, int(w * (1 - overlap))) for w in win]
    acc = np.zeros((model.config.num_classes, *x.shape), np.float64)
    hits = np.zeros(x.shape, np.float64)
    for a in _window_starts(x.shape[0], win[0], steps[0]):
        for b in _window_starts(x.shape[1], win[1], steps[1]):
            for c in _window_starts(x.shape[2], win[2], steps[2]):
                sl = (slice(a, a + win[0]), slice(b, b + win[1]), slice(c, c + win[2]))
                acc[(slice(None),) + sl] += model.predict_logits(Tensor(x[sl][None, None]))[0]
                hits[sl] += 1
    return acc / hits


def predict_whole(model, image: Volume, grid: Sequence[int] | None = None) -> np.ndarray:
    """Whole-volume argmax prediction at the image's own geometry.

    With ``grid`` the image is resampled to that grid and covered by sliding
    windows; otherwise it is resampled to the model's input shape. Logits are
    trilinearly upsampled to the canonical grid before the argmax.
    """
    model = _as_model(model)
    can = reorient_canonical(image)
    if grid is None or tuple(grid) == model.config.input_shape:
        x = prepare_image(can.data, model.config.input_shape)
        logits = model.predict_logits(Tensor(x[None, None]))[0]
    else:
        logits = sliding_window_logits(model, prepare_image(can.data, grid))
    up = np.stack([resample_array(l, can.shape, "trilinear") for l in logits])
    lab = np.argmax(up, axis=0).astype(np.uint8)
    return restore_orientation(lab, image.affine)


def pseudo_label(teacher, manifest: CaseManifest, out_dir, log=None,
                 grid: Sequence[int] | None = None) -> CaseManifest:
    """Label every unlabeled case with the teacher; returns a manifest with pseudo records added."""
    say = log or (lambda msg: None)
    if not isinstance(teacher, PHTransModel) and not Path(teacher).exists():
        raise PipelineError(f"teacher checkpoint {teacher} not found; train the teacher first")
    model = _as_model(teacher)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = [c for c in manifest.cases if c.split != "pseudo"]
    for rec in manifest.split("unlabeled"):
        try:
            img = read_volume(manifest.path(rec.image), kind="image")
        except Exception as exc:  # noqa: BLE001 - unreadable input is skipped, not fatal
            warnings.warn(f"skipping unreadable case {rec.id}: {exc}", RuntimeWarning, stacklevel=2)
            say(f"skip {rec.id}: {exc}")
            continue
        lab = predict_whole(model, img, grid)
        path = out / f"{rec.id}_pseudo.nii.gz"
        write_volume(path, Volume(lab, img.spacing, img.affine, "label"))
        cases.append(CaseRecord(f"{rec.id}_pseudo", rec.image, "pseudo", str(path.resolve()), source=rec.id))
        say(f"pseudo label for {rec.id} -> {path.name}")
    return CaseManifest(manifest.root, cases).validate()


def infer_two_stage(coarse, fine, image: Volume, margin: float = 0.1, return_box: bool = False):
    """Coarse localization, ROI crop, fine segmentation, restoration to the input geometry."""
    coarse, fine = _as_model(coarse), _as_model(fine)
    if coarse.config.in_channels != 1 or fine.config.in_channels != 1:
        raise ValueError("two-stage inference expects single-channel models")
    can = reorient_canonical(image)
    cshape = coarse.config.input_shape
    cl = coarse.predict_logits(Tensor(prepare_image(can.data, cshape)[None, None]))[0]
    cmask = (np.argmax(cl, axis=0) > 0).astype(np.uint8)
    cmask = keep_largest(cmask, [1])
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        box = roi_from_coarse(cmask, margin).scaled(cshape, can.shape)
    crop = can.data[box.slices]
    fshape = fine.config.input_shape
    fl = fine.predict_logits(Tensor(prepare_image(crop, fshape)[None, None]))[0]
    flab = np.argmax(fl, axis=0).astype(np.uint8)
    flab = keep_largest(flab, list(range(1, fine.config.num_classes)))
    out = np.zeros(can.shape, dtype=np.uint8)
    out[box.slices] = resample_array(flab, box.shape, "nearest")
    result = Volume(restore_orientation(out, image.affine), image.spacing, image.affine, "label")
    return (result, box) if return_box else result


def evaluate(coarse, fine, manifest: CaseManifest, cfg: PipelineConfig, split: str = "val") -> SegmentationReport:
    coarse, fine = _as_model(coarse), _as_model(fine)
    cases, ids = [], []
    for rec in manifest.split(split):
        img = read_volume(manifest.path(rec.image), kind="image")
        gt = read_volume(manifest.path(rec.label), kind="label")
        pred = infer_two_stage(coarse, fine, img, cfg.roi_margin)
        cases.append((pred.data, gt.data, img.spacing))
        ids.append(rec.id)
    return report(cases, cfg.class_names, tau=cfg.nsd_tau, case_ids=ids)


@dataclass
class SelfTrainResult:
    out_dir: Path
    manifest: CaseManifest
    reports: dict[str, SegmentationReport]
    checkpoints: dict[str, Path]
    seconds: float

    def table(self, metric: str = "dsc") -> str:
        rows = [(name, rep.row(metric)) for name, rep in self.reports.items()]
        return format_table(rows, self.reports[next(iter(self.reports))].class_names, metric.upper())


def run_selftrain(manifest: CaseManifest, cfg: PipelineConfig, out_dir, echo: bool = False) -> SelfTrainResult:
    """Teacher -> pseudo labels -> coarse and fine students -> evaluation on the val split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "run.log", echo=echo)
    t0 = time.perf_counter()
    ckpts: dict[str, Path] = {}
    reports: dict[str, SegmentationReport] = {}
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")

    def stage(name, fn, *args, **kw):
        log(name, "start")
        t = time.perf_counter()
        try:
            res = fn(*args, **kw)
        except Exception as exc:
            log(name, f"FAILED: {type(exc).__name__}: {exc}")
            raise PipelineError(f"[{name}] {type(exc).__name__}: {exc}") from exc
        log(name, f"done in {time.perf_counter() - t:.1f}s")
        return res

    try:
        manifest.validate()
        ckpts["teacher"] = stage("teacher", train_teacher, manifest, cfg, out / "teacher", log=log.stage("teacher"))
        full = stage("pseudo", pseudo_label, ckpts["teacher"], manifest, out / "pseudo", log=log.stage("pseudo"),
                     grid=cfg.teacher_grid)
        full.save(out / "manifest.json")
        variants = [(ROW_PSEUDO, True, "pd")]
        if cfg.ablation:
            variants.insert(0, (ROW_LABELED, False, "lab"))
        for row, use_pseudo, tag in variants:
            for role in ("coarse", "fine"):
                name = f"{role}-{tag}"
                ckpts[name] = stage(name, train_student, full, cfg, role, out / name, use_pseudo, log=log.stage(name))
            reports[row] = stage(f"eval-{tag}", evaluate, ckpts[f"coarse-{tag}"], ckpts[f"fine-{tag}"], full, cfg)
            log(f"eval-{tag}", f"{row}: mean DSC {reports[row].mean('dsc'):.4f}, mean NSD {reports[row].mean('nsd'):.4f}")
        result = SelfTrainResult(out, full, reports, ckpts, time.perf_counter() - t0)
        rows_dsc = [(n, r.row("dsc")) for n, r in reports.items()]
        rows_nsd = [(n, r.row("nsd")) for n, r in reports.items()]
        (out / "report.csv").write_text(combined_csv(rows_dsc, cfg.class_names, "DSC")
                                        + combined_csv(rows_nsd, cfg.class_names, "NSD").split("\n", 1)[1],
                                        encoding="utf-8")
        for n, r in reports.items():
            (out / f"cases_{'pd' if n == ROW_PSEUDO else 'lab'}.csv").write_text(r.to_csv(n), encoding="utf-8")
        (out / "table.txt").write_text(result.table("dsc") + "\n\n" + result.table("nsd") + "\n", encoding="utf-8")
        log("selftrain", f"finished in {result.seconds:.1f}s")
        return result
    finally:
        log.close()


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def make_phantom_dataset(root, n_labeled: int = 10, n_unlabeled: int = 40, n_val: int = 5,
                         shape=(64, 64, 64), seed: int = 0, num_organs: int = 4) -> CaseManifest:
    """Write phantom NIfTI cases and a manifest.json under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    cases = []
    counts = (("labeled", n_labeled), ("unlabeled", n_unlabeled), ("val", n_val))
    k = 0
    for split, n in counts:
        for i in range(n):
            case_seed = seed * 100_003 + k
            k += 1
            cid = f"{split}_{i:03d}"
            img, lab = generate_phantom(random_phantom_spec(case_seed, shape=shape, num_organs=num_organs))
            write_volume(root / "images" / f"{cid}.nii.gz", img)
            label_rel = None
            if split != "unlabeled":
                label_rel = f"labels/{cid}.nii.gz"
                write_volume(root / label_rel, lab)
            cases.append(CaseRecord(cid, f"images/{cid}.nii.gz", split, label_rel))
    m = CaseManifest(root.resolve(), cases).validate()
    m.save(root / "manifest.json")
    return m
