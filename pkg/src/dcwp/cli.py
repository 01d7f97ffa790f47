"""Command-line entry point: ``dcwp theory|data|train|report``.

Exit codes: 0 success, 1 a check or run failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

import numpy as np

from . import data as bd
from . import theory
from .pipeline import ABLATIONS, ExperimentConfig, run_experiment

log = logging.getLogger("dcwp")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

KEY_ALIASES = {"l1": "lambda_l1", "up": "lambda_up", "up_ft": "lambda_up_ft",
               "align": "lambda_align"}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- configs


def _field_types() -> dict[str, type]:
    return get_type_hints(ExperimentConfig)


def parse_value(key: str, text: str):
    key = KEY_ALIASES.get(key, key)
    types = _field_types()
    if key not in types:
        raise UsageError(f"unknown config key {key!r}")
    kind = types[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return key, low in ("true", "1", "yes")
        if kind is int:
            return key, int(text)
        if kind is float:
            return key, float(text)
        if kind is str:
            return key, text
        return key, tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise UsageError(f"bad value {text!r} for {key}") from None


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[config]\n" + path.read_text())
    return dict(parse_value(k, v) for k, v in parser["config"].items())


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        key, value = parse_value(k.strip(), v)
        out[key] = value
    return out


def parse_ablation(text: str | None) -> dict:
    if not text:
        return {}
    changes = {}
    for token in text.split(","):
        token = token.strip()
        if token.startswith("idx"):
            idx = int(token[3:])
            if idx not in ABLATIONS:
                raise UsageError(f"unknown ablation index {idx}; choose from {sorted(ABLATIONS)}")
            changes.update(ABLATIONS[idx])
        elif token in ("no-pruning", "no-align", "no-wce"):
            changes[{"no-pruning": "pruning", "no-align": "alignment", "no-wce": "wce"}[token]] = False
        else:
            raise UsageError(f"unknown ablation {token!r}")
    return changes


def build_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    if args.method:
        values["method"] = args.method
    if args.seed is not None:
        values["seed"] = args.seed
    values.update(parse_ablation(args.ablation))
    values.update(parse_assignments(args.set))
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------ manifest


@dataclass(frozen=True)
class RunManifest:
    config: dict
    seed: int
    artifacts: dict
    input_hash: str
    inputs: dict = field(default_factory=dict)

    def write(self, path: Path) -> Path:
        if path.exists():
            raise UsageError(f"refusing to overwrite existing manifest {path}")
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def _input_files(config: ExperimentConfig) -> list[Path]:
    if config.dataset != "cmnist":
        return []
    directory = Path(config.data_dir or os.environ.get("DCWP_DATA_DIR", "data/mnist"))
    files = []
    for stems in bd.MNIST_FILES.values():
        for stem in stems:
            try:
                files.append(bd._find(directory, stem))
            except FileNotFoundError as exc:
                raise UsageError(str(exc)) from None
    return files


def make_manifest(config: ExperimentConfig, out_dir: Path, artifacts: dict) -> RunManifest:
    inputs = {str(p): bd.file_hash(p) for p in _input_files(config)}
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for name in sorted(inputs):
        h.update(inputs[name].encode())
    return RunManifest(config.to_dict(), config.seed,
                       {k: str(out_dir / v) for k, v in artifacts.items()}, h.hexdigest(), inputs)


# -------------------------------------------------------------------- theory


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def cmd_theory(args) -> int:
    out = Path(args.out) if args.out else None
    if args.what == "bounds":
        if args.phi != "auto":
            phi = float(args.phi)
            if not 0 <= phi <= 1:
                raise UsageError("--phi must be 'auto' or lie in [0, 1]")
        else:
            phi = "auto"
        rows = theory.bound_grid(_floats(args.p or "0.6,0.75,0.9,0.99"), args.D or 15, args.n,
                                 args.seed, phi=phi)
        violations = sum(r["mc_loss"] > r["training_bound"] + 3 * r["se"] for r in rows)
        print(f"{len(rows)} grid points, {violations} bound violations")
        ok = violations == 0
    elif args.what == "flow":
        rows, ok = _flow_rows(float(args.p or 0.75), args.D or 5, args.samples)
    elif args.what == "ratio":
        res = theory.weight_ratio_experiment(_floats(args.p or "0.6,0.7,0.8,0.9,0.99"), args.D or 15,
                                             args.epochs, args.batch, args.seeds, seed=args.seed)
        rows = [{"p": r.p, "alpha_mean": r.alpha_mean, "alpha_se": r.alpha_se,
                 "unbiased_accuracy": r.unbiased_accuracy} for r in res]
        for r in rows:
            print(f"p={r['p']:<5} alpha={r['alpha_mean']:.4f}  unbiased acc={r['unbiased_accuracy']:.4f}")
        drops = [a["alpha_mean"] - b["alpha_mean"] for a, b in zip(rows, rows[1:])
                 if b["alpha_mean"] < a["alpha_mean"]]
        ok = len(drops) <= 1 and all(d <= 0.05 for d in drops)
    else:
        p = float(args.p or 0.9)
        D = args.D or 15
        if args.Q < D + 1:
            raise UsageError(f"--Q must be at least D+1 = {D + 1}")
        r = theory.misalignment_experiment(D, p, args.Q, args.pairs, np.random.default_rng(args.seed))
        rows = [dataclasses.asdict(r)]
        print(f"cross-env cosine  {r.cross_mean:.4f} +/- {r.cross_se:.4f} (expected {r.expected_cross:.4f})")
        print(f"within-env cosine {r.within_mean:.4f} +/- {r.within_se:.4f} (expected {r.expected_within:.4f})")
        ok = (abs(r.cross_mean - r.expected_cross) <= 3 * r.cross_se
              and abs(r.within_mean - r.expected_within) <= 3 * r.within_se)
    if out:
        theory.write_csv(rows, out)
    else:
        _print_csv(rows)
    return EXIT_OK if ok else EXIT_CHECK


def _flow_rows(p: float, D: int, samples: int):
    if not 0.5 < p < 1:
        raise UsageError("--p must lie in (0.5, 1) for the flow")
    w_star = theory.fixed_point(p)
    w_inv0, w_sp0 = 0.5, 0.5 * w_star
    terminal = theory.gradient_flow(p, D, w_inv0, w_sp0)
    ts = np.geomspace(1e-3, terminal.final.t, samples)
    tr = theory.gradient_flow(p, D, w_inv0, w_sp0, times=ts, horizon=terminal.final.t)
    env = theory.analytic_envelopes(p, D, w_inv0, w_sp0, tr.t)
    rows = [{"t": t, "w_inv": wi, "w_sp": ws[0], "alpha": ws[0] / wi, "w_inv_lower": lo,
             "w_inv_upper": hi, "w_sp_lower": sl[0], "alpha_lower": al[0]}
            for t, wi, ws, lo, hi, sl, al in zip(tr.t, tr.w_inv, tr.w_sp, env.w_inv_lower,
                                                 env.w_inv_upper, env.w_sp_lower, env.alpha_lower)]
    gap = float(np.max(np.abs(terminal.final.w_sp - w_star)))
    tol = 1e-9
    ok = (gap < 1e-3
          and np.all(tr.w_inv >= env.w_inv_lower - tol) and np.all(tr.w_inv <= env.w_inv_upper + tol)
          and np.all(tr.w_sp >= env.w_sp_lower - tol) and np.all(tr.alpha >= env.alpha_lower - tol)
          and np.all(tr.alpha > 0))
    print(f"final w_sp = {terminal.final.w_sp[0]:.6f} (fixed point {w_star:.6f}, gap {gap:.2e}) "
          f"at t = {terminal.final.t:.4g}; envelopes {'hold' if ok else 'VIOLATED'}")
    return rows, bool(ok)


def _print_csv(rows):
    if rows:
        writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------- data


def cmd_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    if args.what == "gen-cmnist":
        if not 0 < args.ratio < 1:
            raise UsageError("--ratio must lie in (0, 1)")
        directory = Path(args.data_dir or os.environ.get("DCWP_DATA_DIR", "data/mnist"))
        try:
            x_tr, y_tr = bd.load_mnist(directory, "train")
            x_te, y_te = bd.load_mnist(directory, "test")
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
        inputs = {str(bd._find(directory, s)): bd.file_hash(bd._find(directory, s))
                  for stems in bd.MNIST_FILES.values() for s in stems}
        params = {"ratio": args.ratio, "seed": args.seed, "data_dir": str(directory)}
        splits = {"train": lambda: bd.generate_colored_mnist(x_tr, y_tr, bd.ColoredMnistSpec(args.ratio, "train"), rng),
                  "test": lambda: bd.generate_colored_mnist(x_te, y_te, bd.ColoredMnistSpec(args.ratio, "test"), rng)}
    else:
        try:
            spec = bd.BinaryEnvSpec(args.p, args.D, args.phi)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        inputs = {}
        params = {"p": args.p, "D": args.D, "phi": args.phi, "n": args.n, "seed": args.seed}
        splits = {"train": lambda: bd.sample_binary_env(spec, args.n, rng)}
    artifacts = {name: f"{name}.dcwpd" for name in splits}
    h = hashlib.sha256(json.dumps(params, sort_keys=True).encode())
    for name in sorted(inputs):
        h.update(inputs[name].encode())
    manifest = {"command": args.what, "params": params, "inputs": inputs, "input_hash": h.hexdigest(),
                "artifacts": {k: str(out / v) for k, v in artifacts.items()}}
    groups = {}
    for name, make in splits.items():
        ds = make()
        path = bd.save_dataset(ds, out / artifacts[name])
        aligned, conflicting = ds.group_counts()
        groups[name] = {"aligned": aligned, "conflicting": conflicting, "sha256": bd.file_hash(path)}
        print(f"{name}: {len(ds)} samples, (aligned, conflicting) = ({aligned}, {conflicting}) -> {path}")
    manifest["group_counts"] = groups
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------- train/report


def _run_one(config: ExperimentConfig, out: Path, cache: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"checkpoint": "model.ckpt", "metrics": "metrics.json"}
    if config.method != "erm" and (config.method == "mrm" or config.pruning):
        artifacts["mask"] = "mask.bin"
    make_manifest(config, out, artifacts).write(out / "manifest.json")
    result = run_experiment(config, out_dir=out, cache=cache)
    return result.report.to_dict()


def cmd_train(args) -> int:
    if args.from_manifest:
        if args.config or args.set or args.ablation or args.sweep:
            raise UsageError("--from-manifest cannot be combined with other config options")
        cfg = RunManifest.read(args.from_manifest).config
        cfg["hidden_dims"] = tuple(cfg["hidden_dims"])
        config = ExperimentConfig(**cfg)
    else:
        config = build_config(args)
    out = Path(args.out)
    cache: dict = {}
    if not args.sweep:
        metrics = _run_one(config, out, cache)
        _append_jsonl(out / "results.jsonl", {"run": str(out), **metrics})
        print(render_table([{"run": out.name, **metrics}]))
        return EXIT_OK
    if "=" not in args.sweep:
        raise UsageError("--sweep expects key=v1,v2,...")
    key, values = args.sweep.split("=", 1)
    rows = []
    for text in values.split(","):
        k, v = parse_value(key.strip(), text)
        try:
            cfg = config.replace(**{k: v})
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        metrics = _run_one(cfg, out / f"{k}={text.strip()}", cache)
        rows.append({k: v, **metrics})
    theory.write_csv(rows, out / "sweep.csv")
    for r in rows:
        _append_jsonl(out / "results.jsonl", r)
    print(render_table(rows))
    return EXIT_OK


def _append_jsonl(path: Path, row: dict):
    with open(path, "a") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


REPORT_COLUMNS = ("unbiased_accuracy", "conflict_accuracy", "aligned_accuracy",
                  "worst_group_accuracy", "pruning_ratio", "mining_precision", "mining_recall")


def render_table(rows: list[dict]) -> str:
    keys = [k for k in rows[0] if k not in REPORT_COLUMNS] + list(REPORT_COLUMNS)
    fmt = lambda v: "skip" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
    cells = [[fmt(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    return "\n".join([line(keys), line(["-" * w for w in widths]), *map(line, cells)])


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        path = Path(run) / "metrics.json"
        if not path.exists():
            raise UsageError(f"no metrics.json in {run}")
        rows.append({"run": Path(run).name, **json.loads(path.read_text())})
    print(render_table(rows))
    if args.csv:
        theory.write_csv(rows, args.csv)
    if args.jsonl:
        with open(args.jsonl, "w") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcwp", description="Debiased contrastive weight pruning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    th = sub.add_parser("theory", help="numerical checks on the linear spurious-feature model")
    th.add_argument("what", choices=("bounds", "flow", "ratio", "misalign"))
    th.add_argument("--p", help="bias strength, or a comma list for bounds/ratio")
    th.add_argument("--D", type=int, help="number of spurious features")
    th.add_argument("--phi", default="auto", help="mixture weight for bounds ('auto' = debiasing weight)")
    th.add_argument("--n", type=int, default=100_000, help="Monte-Carlo samples per grid point")
    th.add_argument("--samples", type=int, default=100, help="trajectory samples for flow")
    th.add_argument("--epochs", type=int, default=500)
    th.add_argument("--batch", type=int, default=1024)
    th.add_argument("--seeds", type=int, default=15)
    th.add_argument("--Q", type=int, default=64, help="embedding width for misalign")
    th.add_argument("--pairs", type=int, default=10_000)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", help="CSV path (default: stdout)")
    th.set_defaults(func=cmd_theory)

    da = sub.add_parser("data", help="generate dataset containers")
    da.add_argument("what", choices=("gen-cmnist", "gen-binary"))
    da.add_argument("--out", required=True)
    da.add_argument("--seed", type=int, default=0)
    da.add_argument("--ratio", type=float, default=0.01)
    da.add_argument("--data-dir", help="directory with MNIST IDX files (default $DCWP_DATA_DIR)")
    da.add_argument("--p", type=float, default=0.9)
    da.add_argument("--D", type=int, default=15)
    da.add_argument("--phi", type=float, default=0.0)
    da.add_argument("--n", type=int, default=10_000)
    da.set_defaults(func=cmd_data)

    tr = sub.add_parser("train", help="run an experiment")
    tr.add_argument("--method", choices=("erm", "mrm", "dcwp"))
    tr.add_argument("--ablation", help="comma list of no-pruning, no-align, no-wce or idxN")
    tr.add_argument("--config", help="flat key = value config file")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    tr.add_argument("--sweep", metavar="KEY=V1,V2,...", help="one run per value")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--from-manifest", help="rerun the config recorded in a manifest")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    rp = sub.add_parser("report", help="tabulate finished runs")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--csv")
    rp.add_argument("--jsonl")
    rp.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dcwp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"dcwp: failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
