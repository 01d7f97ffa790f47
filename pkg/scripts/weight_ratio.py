"""Spurious-to-invariant weight ratio of a linear BCE classifier across bias
strengths, written as CSV.

    python3 scripts/weight_ratio.py --out results/weight_ratio.csv
"""
import argparse
from dataclasses import asdict

from dcwp.theory import weight_ratio_experiment, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p", type=float, nargs="+", default=[0.6, 0.7, 0.8, 0.9, 0.99])
    ap.add_argument("--D", type=int, default=15)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--seeds", type=int, default=15)
    ap.add_argument("--out", default="weight_ratio.csv")
    args = ap.parse_args()

    results = weight_ratio_experiment(args.p, args.D, args.epochs, args.batch, args.seeds)
    rows = []
    for r in results:
        row = asdict(r)
        row.pop("alphas")
        rows.append(row)
        print(f"p={r.p:<5} alpha={r.alpha_mean:.4f} +- {r.alpha_se:.4f}  "
              f"unbiased acc={r.unbiased_accuracy:.4f}")
    print(f"wrote {write_csv(rows, args.out)}")


if __name__ == "__main__":
    main()
