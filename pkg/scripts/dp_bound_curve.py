"""Lower bound on the achievable verification p-value for a DP-trained suspect.

Prints (or writes as CSV) the bound over an epsilon grid for several n_s,
and optionally trains a small DP-SGD model per noise multiplier to show the
epsilon the accountant assigns to it.

    python3 scripts/dp_bound_curve.py --n-s 10 50 100 --csv bound.csv
"""

import argparse
import math

import numpy as np

from veridip import accountant

# sqrt(sigma0^2 + sigma1^2) used when no measured spread is given
DEFAULT_SPREAD = 0.3287


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps-max", type=float, default=1.0)
    ap.add_argument("--points", type=int, default=101)
    ap.add_argument("--n-s", type=int, nargs="+", default=[10, 50, 100])
    ap.add_argument("--spread", type=float, default=DEFAULT_SPREAD,
                    help="sqrt(sigma0^2 + sigma1^2), split evenly between the two pools")
    ap.add_argument("--noise", type=float, nargs="*", default=[0.5, 1.0, 2.0, 4.0, 8.0],
                    help="noise multipliers to report epsilon for")
    ap.add_argument("--train-size", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--delta", type=float, default=1e-5)
    ap.add_argument("--csv", help="write the bound curve here")
    args = ap.parse_args(argv)

    s = args.spread / math.sqrt(2)
    rows = accountant.bound_curve(np.linspace(0, args.eps_max, args.points), args.n_s, s, s)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(accountant.curve_to_csv(rows))
    step = max(1, (args.points - 1) // 10)
    print("epsilon  " + "  ".join(f"n_s={n:<6d}" for n in sorted(args.n_s)))
    by_n = {n: [r for r in rows if r.n_s == n] for n in args.n_s}
    for i in range(0, args.points, step):
        eps = by_n[args.n_s[0]][i].epsilon
        print(f"{eps:7.3f}  " + "  ".join(f"{by_n[n][i].min_p:10.3e}" for n in sorted(args.n_s)))

    if args.noise:
        print(f"\nDP-SGD epsilon at delta={args.delta} (n={args.train_size}, batch {args.batch_size}, "
              f"{args.epochs} epochs) and the implied bound at n_s={max(args.n_s)}")
        for z in args.noise:
            eps = accountant.epsilon_for_training(args.train_size, args.batch_size, args.epochs, z, args.delta)
            bound = accountant.min_pvalue_bound(eps, max(args.n_s), s, s)
            print(f"  z={z:<5g} epsilon {eps:9.3f}  min p {bound:.3e}")


if __name__ == "__main__":
    main()
