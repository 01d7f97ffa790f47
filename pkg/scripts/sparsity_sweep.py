"""Pruning ratio and unbiased accuracy of DCWP as the L1 coefficient grows.

    python3 scripts/sparsity_sweep.py configs/synthetic.cfg --l1 1e-6 3.5e-6 1e-5 1e-4
"""
import argparse
import csv
import sys

import numpy as np

from dcwp.cli import parse_assignments, read_config_file
from dcwp.pipeline import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--l1", type=float, nargs="+", default=[1e-7, 1e-6, 3.5e-6, 1e-5, 1e-4, 1e-3])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="CSV path (default: stdout)")
    args = ap.parse_args()

    base = ExperimentConfig(**{**read_config_file(args.config), **parse_assignments(args.set)})
    caches = {s: {} for s in args.seeds}
    erm = {s: run_experiment(base.replace(method="erm", seed=s), cache=caches[s]).report.unbiased_accuracy
           for s in args.seeds}
    rows = []
    for lam in args.l1:
        reports = [run_experiment(base.replace(lambda_l1=lam, seed=s), cache=caches[s]).report
                   for s in args.seeds]
        rows.append({"lambda_l1": lam,
                     "pruning_ratio": float(np.mean([r.pruning_ratio for r in reports])),
                     "unbiased_accuracy": float(np.mean([r.unbiased_accuracy for r in reports])),
                     "erm_unbiased_accuracy": float(np.mean(list(erm.values())))})
        print(f"lambda_l1={lam:.2e} pruned={rows[-1]['pruning_ratio']:.3f} "
              f"acc={rows[-1]['unbiased_accuracy']:.4f}", file=sys.stderr)

    f = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(f, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        f.close()


if __name__ == "__main__":
    main()
