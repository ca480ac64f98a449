"""Matmul cost of per-sample expert aggregation vs per-sample rank-one scaling over a grid.

    python3 scripts/cost_model_table.py --d 256 --l 49
"""

import argparse
import itertools

from eksdecomp.eks import eks_cost_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--d", type=int, default=256)
    ap.add_argument("--l", type=int, default=49)
    ap.add_argument("--tasks", type=int, nargs="+", default=[2, 4, 8, 11, 32])
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--batches", type=int, nargs="+", default=[1, 8, 64])
    args = ap.parse_args()

    print(f"{'T':>3} {'r':>3} {'b':>4} {'eks_cost':>14} {'flora_cost':>14} {'ratio':>7} cheaper")
    for t, r, b in itertools.product(args.tasks, args.ranks, args.batches):
        c = eks_cost_model(t, r, b, args.l, args.d)
        print(f"{t:>3} {r:>3} {b:>4} {c.eks_cost:>14d} {c.flora_cost:>14d} "
              f"{c.eks_cost / c.flora_cost:7.3f} {'eks' if c.eks_cheaper else 'flora'}")


if __name__ == "__main__":
    main()
