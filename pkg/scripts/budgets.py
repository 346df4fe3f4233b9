"""Print parameter budgets for the residual-block layouts used in super-resolution nets.

Each row is one two-conv residual block decomposed with split-wise bases, with
and without sharing the basis across the two convolutions.
"""
import argparse

from filterbasis.planner import LayerShape, count_params, optimal_split, rate_split

ROWS = [
    ("EDSR 256ch", 256, 32, 1),
    ("EDSR 128ch", 128, 27, 1),
    ("EDSR 128ch wide", 128, 40, 1),
    ("SRResNet 64ch", 64, 14, 1),
    ("SRResNet 64ch s=2", 64, 32, 2),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kernel", type=int, default=3)
    args = ap.parse_args()
    k = args.kernel
    print(f"{'block':<20}{'m':>4}{'s':>4}{'params':>10}{'rate':>8}{'shared':>10}{'rate':>8}{'s_opt':>7}")
    for label, c, m, s in ROWS:
        shape = LayerShape(n=c, c=c, w=k, h=k)
        alone = count_params(shape, m, s) + count_params(shape, m, s)
        shared = count_params(shape, m, s, shared_across=2)
        s_q = optimal_split(shape)[2]
        print(f"{label:<20}{m:>4}{s:>4}{alone.params_compressed:>10}{alone.ratio:>8.1%}"
              f"{shared.params_compressed:>10}{shared.ratio:>8.1%}{s_q:>7}")
        assert abs(alone.ratio - rate_split(shape, m, s)) < 1e-12


if __name__ == "__main__":
    main()
