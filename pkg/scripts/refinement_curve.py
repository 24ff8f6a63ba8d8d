"""Histogram L1 between two Gaussian samples as dyadic partitions get finer.

The coarse-partition distance never exceeds the fine one; the printed
curve shows how much of the gap each level of discretization hides.
"""

import argparse

from ddg_lab.rng import Rng
from ddg_lab.theory import dyadic_partition, empirical_refinement_check


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--shift", type=float, default=0.5)
    ap.add_argument("--depth", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = Rng(args.seed)
    a = rng.normal(args.n)
    b = rng.normal(args.n, mean=args.shift)
    print("cells  l1")
    for depth in range(1, args.depth + 1):
        lc, lf = empirical_refinement_check(a, b, dyadic_partition(-5, 5, depth - 1), dyadic_partition(-5, 5, depth))
        if depth == 1:
            print(f"{1:>5}  {lc:.4f}")
        print(f"{2 ** depth:>5}  {lf:.4f}")


if __name__ == "__main__":
    main()
