"""Parameter count of a preset with a per-component breakdown.

Usage: python3 scripts/param_breakdown.py [PRESET ...] [--depth 2] [--target 6.66e6]
"""

import argparse

from phtrans import architecture as A


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("presets", nargs="*", default=["phtrans_s_coarse", "phtrans_s_fine"])
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--target", type=float, default=6.66e6, help="reference count to compare against")
    args = ap.parse_args()

    for name in args.presets:
        model = A.PHTransModel(A.preset(name))
        total = A.count_parameters(model)
        print(f"{name}: {total:,} parameters ({total / args.target - 1:+.1%} vs {args.target:,.0f})")
        for key, n in A.parameter_breakdown(model, args.depth).items():
            print(f"  {key:28s} {n:>12,}  {n / total:6.1%}")
        # deepest stage is usually the whole story: list its blocks
        last = f"encoder.{model.config.num_stages - 1}"
        print(f"  {last} blocks:")
        for key, n in A.parameter_breakdown(model, 4).items():
            if key.startswith(last + "."):
                print(f"    {key:26s} {n:>12,}")
        print()


if __name__ == "__main__":
    main()
