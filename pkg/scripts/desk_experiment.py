"""Phantom self-training experiment: labeled-only vs labeled + pseudo-labeled students.

Usage: python3 scripts/desk_experiment.py OUT_DIR [--labeled 10 --unlabeled 40 --val 5 --config cfg.json]
"""

import argparse
import json
from pathlib import Path

from phtrans.pipeline import PipelineConfig, make_phantom_dataset, run_selftrain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--labeled", type=int, default=10)
    ap.add_argument("--unlabeled", type=int, default=40)
    ap.add_argument("--val", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", type=Path)
    args = ap.parse_args()

    cfg = PipelineConfig.desk()
    if args.config:
        cfg = PipelineConfig.from_dict(json.loads(args.config.read_text()))
    manifest = make_phantom_dataset(args.out / "data", args.labeled, args.unlabeled, args.val, seed=args.seed)
    res = run_selftrain(manifest, cfg, args.out / "run", echo=True)
    print(res.table("dsc"))
    print()
    print(res.table("nsd"))
    print(f"total {res.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
