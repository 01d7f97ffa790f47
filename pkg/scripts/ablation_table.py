"""Unbiased accuracy of each module combination, averaged over seeds.

    python3 scripts/ablation_table.py configs/synthetic.cfg --seeds 0 1 2 3
"""
import argparse

import numpy as np

from dcwp.cli import parse_assignments, read_config_file
from dcwp.pipeline import ABLATIONS, ExperimentConfig, ablation, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    base = ExperimentConfig(**{**read_config_file(args.config), **parse_assignments(args.set)})
    caches = {s: {} for s in args.seeds}
    print(f"{'':6}{'pruning':>9}{'wce':>6}{'align':>7}   unbiased acc")
    for idx, modules in ABLATIONS.items():
        acc = [run_experiment(ablation(base.replace(seed=s), idx), cache=caches[s]).report.unbiased_accuracy
               for s in args.seeds]
        flags = "".join(f"{'x' if modules[k] else '-':>{w}}" for k, w in
                        (("pruning", 9), ("wce", 6), ("alignment", 7)))
        print(f"Idx{idx:<3}{flags}{np.mean(acc):>9.4f} +- {np.std(acc):.4f}")


if __name__ == "__main__":
    main()
