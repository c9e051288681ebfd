"""Command-line entry point: phantom-gen, train, pseudo-label, infer, selftrain, eval."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .evalpost import report
from .pipeline import (
    CaseManifest,
    PipelineConfig,
    RunLog,
    evaluate,
    infer_two_stage,
    make_phantom_dataset,
    pseudo_label,
    run_selftrain,
    train_student,
    train_teacher,
)
from .volumeio import read_volume, write_volume


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ValueError(f"cannot set {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def read_config_file(path) -> dict:
    """JSON object, or ``dotted.key = value`` lines (values parsed as JSON when possible)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        _set_path(out, k.strip(), _parse_value(v.strip()))
    return out


def load_config(args) -> PipelineConfig:
    base = PipelineConfig.full() if getattr(args, "profile", "desk") == "full" else PipelineConfig.desk()
    d: dict = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(d, k.strip(), _parse_value(v.strip()))
    return PipelineConfig.from_dict(d, base)


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="JSON or key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")


def cmd_phantom_gen(args) -> None:
    m = make_phantom_dataset(args.out, args.labeled, args.unlabeled, args.val, tuple(args.shape), args.seed,
                             args.organs)
    print(f"wrote {len(m.cases)} cases to {args.out / 'manifest.json'}")


def cmd_train(args) -> None:
    cfg = load_config(args)
    manifest = CaseManifest.load(args.manifest)
    log = RunLog(args.out / "run.log", echo=True)
    try:
        if args.role == "teacher":
            path = train_teacher(manifest, cfg, args.out, log=log.stage("teacher"))
        else:
            path = train_student(manifest, cfg, args.role, args.out, not args.no_pseudo, log=log.stage(args.role))
    finally:
        log.close()
    print(f"checkpoint: {path}")


def cmd_pseudo_label(args) -> None:
    manifest = CaseManifest.load(args.manifest)
    log = RunLog(args.out / "run.log", echo=True)
    try:
        full = pseudo_label(args.teacher, manifest, args.out, log=log.stage("pseudo"),
                            grid=load_config(args).teacher_grid)
    finally:
        log.close()
    full.save(args.out / "manifest.json")
    print(f"manifest with {len(full.split('pseudo'))} pseudo cases: {args.out / 'manifest.json'}")


def cmd_infer(args) -> None:
    img = read_volume(args.image, kind="image")
    lab, box = infer_two_stage(args.coarse, args.fine, img, args.margin, return_box=True)
    write_volume(args.out, lab)
    print(f"wrote {args.out} (ROI {box.lo}..{box.hi})")


def cmd_selftrain(args) -> None:
    cfg = load_config(args)
    manifest = CaseManifest.load(args.manifest)
    res = run_selftrain(manifest, cfg, args.out, echo=True)
    print(res.table("dsc"))
    print()
    print(res.table("nsd"))


def cmd_eval(args) -> None:
    cfg = load_config(args)
    if args.pred:
        if len(args.pred) != len(args.gt or []):
            raise ValueError("--pred and --gt must be given the same number of times")
        cases = []
        for p, g in zip(args.pred, args.gt):
            gt = read_volume(g, kind="label")
            cases.append((read_volume(p, kind="label").data, gt.data, gt.spacing))
        rep = report(cases, cfg.class_names, tau=cfg.nsd_tau, case_ids=[Path(p).name for p in args.pred])
    else:
        if not (args.coarse and args.fine and args.manifest):
            raise ValueError("eval needs --pred/--gt pairs or --coarse, --fine and --manifest")
        rep = evaluate(args.coarse, args.fine, CaseManifest.load(args.manifest), cfg, args.split)
    text = rep.to_csv()
    if args.csv:
        args.csv.write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"mean DSC {rep.mean('dsc'):.4f}  mean NSD {rep.mean('nsd'):.4f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phtrans", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic phantom dataset and manifest")
    p.add_argument("out", type=Path)
    p.add_argument("--labeled", type=int, default=10)
    p.add_argument("--unlabeled", type=int, default=40)
    p.add_argument("--val", type=int, default=5)
    p.add_argument("--shape", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--organs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_phantom_gen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--role", choices=("teacher", "coarse", "fine"), required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-pseudo", action="store_true", help="students: ignore pseudo-labeled cases")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("pseudo-label", help="label unlabeled cases with a teacher")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(fn=cmd_pseudo_label)

    p = sub.add_parser("infer", help="two-stage inference on one volume")
    p.add_argument("--coarse", type=Path, required=True)
    p.add_argument("--fine", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--margin", type=float, default=0.1)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("selftrain", help="teacher, pseudo labels, students and evaluation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(fn=cmd_selftrain)

    p = sub.add_parser("eval", help="DSC / NSD report")
    p.add_argument("--pred", type=Path, action="append")
    p.add_argument("--gt", type=Path, action="append")
    p.add_argument("--coarse", type=Path)
    p.add_argument("--fine", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="val")
    p.add_argument("--csv", type=Path)
    _add_config_args(p)
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - reported as a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
