"""Mining, pretraining, pruning-parameter search, finetuning and evaluation."""
from __future__ import annotations

import dataclasses
import functools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as bd
from .masking import PruningParams, binarize, export_mask, pruning_ratio, sample_mask
from .models import MaskedMLP, MLPConfig, Optimizer, apply, init_weights, save_checkpoint
from .objectives import (LossWeights, alignment_from_hidden, ce, gce, l1_penalty,
                         wce_from_logits)

log = logging.getLogger(__name__)

METHODS = ("erm", "mrm", "dcwp")
MINING_MODES = ("gce", "early_stopped_erm")
SAMPLERS = ("oversample", "analytic")


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; every field is a scalar or a tuple."""

    # data
    dataset: str = "synthetic"          # synthetic | cmnist
    ratio: float = 0.01
    n_train: int = 4000
    n_test: int = 4000
    num_classes: int = 4
    spurious_dim: int = 64
    inv_dim: int = 16
    inv_noise: float = 1.5
    sp_flip: float = 0.1
    code_seed: int = 0
    data_dir: str = ""
    # model and optimisation
    hidden_dims: tuple[int, ...] = (100, 100, 100)
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 1e-3                    # pretraining and bias-capturing
    ft_lr: float = 1e-3                 # finetuning after pruning
    theta_lr: float = 0.01
    # budgets
    t1: int = 1000                      # bias-capturing model (GCE)
    erm_mining_iters: int = 1000        # early-stopped ERM mining
    pretrain_iters: int = 10000
    t2: int = 2000                      # pruning parameters
    t3: int = 1000                      # finetuning
    # loss weights
    q: float = 0.7
    lambda_up: float = 80.0             # pruning-parameter training
    lambda_up_ft: float = 80.0          # finetuning
    lambda_align: float = 0.05
    lambda_l1: float = 1e-8
    tau: float = 0.1
    gumbel_tau: float = 0.5
    theta_init: float = 1.5
    # modes
    method: str = "dcwp"
    mining: str = "gce"
    sampler: str = "oversample"
    pruning: bool = True
    alignment: bool = True
    wce: bool = True
    reset: bool = False
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        for name in ("t1", "erm_mining_iters", "pretrain_iters", "t2", "t3", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mining not in MINING_MODES:
            raise ValueError(f"mining must be one of {MINING_MODES}, got {self.mining!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.dataset not in ("synthetic", "cmnist"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")
        self.loss_weights()  # validates the remaining ranges

    def loss_weights(self, finetune: bool = False) -> LossWeights:
        return LossWeights(lambda_up=self.lambda_up_ft if finetune else self.lambda_up,
                           lambda_align=self.lambda_align if self.alignment else 0.0,
                           lambda_l1=self.lambda_l1, q=self.q, tau=self.tau)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


ABLATIONS = {
    # ablation indices: which modules are switched on
    1: dict(pruning=False, wce=False, alignment=False),
    3: dict(pruning=False, wce=True, alignment=False),
    4: dict(pruning=False, wce=True, alignment=True),
    5: dict(pruning=True, wce=True, alignment=False),
    6: dict(pruning=True, wce=True, alignment=True),
}


def ablation(config: ExperimentConfig, idx: int) -> ExperimentConfig:
    return config.replace(method="dcwp", **ABLATIONS[idx])


# --------------------------------------------------------------------- seeds

STAGES = ("data", "mining", "pretrain", "theta", "finetune", "reset")


def stage_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per stage, so toggling one stage leaves the
    random streams of the others untouched."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {name: np.random.default_rng(s) for name, s in zip(STAGES, children)}


# ---------------------------------------------------------------------- data


def load_data(config: ExperimentConfig, rng: np.random.Generator
              ) -> tuple[bd.BiasedDataset, bd.BiasedDataset]:
    if config.dataset == "synthetic":
        spec = bd.SyntheticSpec(config.num_classes, config.spurious_dim, config.ratio,
                                config.inv_dim, config.inv_noise, config.sp_flip, config.code_seed)
        return (bd.generate_synthetic(spec, config.n_train, rng),
                bd.generate_synthetic(spec, config.n_test, rng, balanced=True))
    directory = config.data_dir or os.environ.get("DCWP_DATA_DIR", "data/mnist")
    x_tr, y_tr = bd.load_mnist(directory, "train")
    x_te, y_te = bd.load_mnist(directory, "test")
    train = bd.generate_colored_mnist(x_tr, y_tr, bd.ColoredMnistSpec(config.ratio, "train"), rng)
    test = bd.generate_colored_mnist(x_te, y_te, bd.ColoredMnistSpec(config.ratio, "test"), rng)
    return train, test


# ------------------------------------------------------------------ sampling


class UniformSampler:
    """Batches from successive random permutations of the training set."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm, self._pos = rng.permutation(n), 0

    def draw(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm, self._pos = self.rng.permutation(self.n), 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


class GroupSampler:
    """Draws each batch row from S_bc with probability lambda_up/(1+lambda_up)
    and from S_ba otherwise, uniformly within the group.

    A given S_bc sample is therefore drawn lambda_up*|S_ba|/|S_bc| times as
    often as a given S_ba sample.  S_bc rows come in same-class pairs where
    the class has two or more members, so contrastive anchors have positives.
    """

    def __init__(self, y: np.ndarray, conflicting: np.ndarray, lambda_up: float,
                 batch_size: int, rng: np.random.Generator):
        self.y = np.asarray(y)
        self.bc = np.flatnonzero(conflicting)
        self.ba = np.flatnonzero(~np.asarray(conflicting, dtype=bool))
        self.share = lambda_up / (1 + lambda_up) if self.ba.size else 1.0
        if self.bc.size == 0:
            self.share = 0.0
        self.batch_size, self.rng = batch_size, rng
        # S_bc sorted by class, with each class's start and size, for partner draws
        self._sorted = self.bc[np.argsort(self.y[self.bc], kind="stable")]
        classes, starts, counts = np.unique(self.y[self._sorted], return_index=True,
                                            return_counts=True)
        self._start = dict(zip(classes.tolist(), starts))
        self._count = dict(zip(classes.tolist(), counts))

    def draw(self) -> np.ndarray:
        k = int(self.rng.binomial(self.batch_size, self.share))
        heads = self.rng.choice(self.bc, size=(k + 1) // 2) if k else np.zeros(0, dtype=int)
        cls = self.y[heads].tolist()
        start = np.array([self._start[c] for c in cls], dtype=int)
        count = np.array([self._count[c] for c in cls], dtype=int)
        partners = self._sorted[start + (self.rng.random(len(cls)) * count).astype(int)]
        bc_rows = np.stack([heads, partners], axis=1).reshape(-1)[:k] if k else heads
        ba_rows = self.rng.choice(self.ba, size=self.batch_size - k) if k < self.batch_size else \
            np.zeros(0, dtype=int)
        return np.concatenate([bc_rows, ba_rows]).astype(np.intp)


# ------------------------------------------------------------------- results


@dataclass
class MiningResult:
    bc: np.ndarray
    ba: np.ndarray
    precision: float | None
    recall: float | None

    @property
    def conflicting(self) -> np.ndarray:
        flags = np.zeros(self.bc.size + self.ba.size, dtype=bool)
        flags[self.bc] = True
        return flags


@dataclass
class MetricsReport:
    unbiased_accuracy: float
    conflict_accuracy: float | None
    aligned_accuracy: float | None
    worst_group_accuracy: float
    mining_precision: float | None = None
    mining_recall: float | None = None
    pruning_ratio: float | None = None
    timings: dict = field(default_factory=dict, compare=False)

    def to_dict(self, with_timings: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_timings:
            d.pop("timings")
        return d


def mining_scores(bc: np.ndarray, truth_conflicting: np.ndarray | None):
    if truth_conflicting is None:
        return None, None
    true_bc = np.flatnonzero(truth_conflicting)
    hit = np.intersect1d(bc, true_bc).size
    precision = hit / bc.size if bc.size else None
    recall = hit / true_bc.size if true_bc.size else None
    return precision, recall


# ------------------------------------------------------------------ training


def train_weights(model: MaskedMLP, ds: bd.BiasedDataset, iters: int, config: ExperimentConfig,
                  rng: np.random.Generator, loss: str = "ce", conflicting: np.ndarray | None = None,
                  weights: LossWeights | None = None, lr: float | None = None) -> list[float]:
    """Train weights and biases in place (mask, if any, stays fixed).

    ``loss`` is ``ce``, ``gce`` or ``debias`` (WCE plus optional alignment).
    Returns the per-iteration loss values.
    """
    masks = model.mask
    opt = Optimizer(config.optimizer, config.lr if lr is None else lr)
    if loss == "debias":
        sampler = _debias_sampler(ds, conflicting, weights.lambda_up, config, rng)
    else:
        sampler = UniformSampler(len(ds), config.batch_size, rng)
    n_layers = len(model.weights)
    history = []
    for _ in range(iters):
        idx = sampler.draw()
        x, y = ds.x[idx], ds.y[idx]

        def objective(*params):
            net = functools.partial(apply, weights=params[:n_layers], biases=params[n_layers:],
                                    masks=masks)
            if loss == "ce":
                return ce(net(x)[1], y)
            if loss == "gce":
                return gce(net(x)[1], y, config.q)
            return _debias_value(net, x, y, conflicting[idx], weights, config)

        value, grads = ad.value_and_grad(objective, *model.weights, *model.biases)
        opt.step(model.weights + model.biases, grads)
        history.append(value)
    return history


def _debias_sampler(ds, conflicting, lambda_up, config, rng):
    if config.sampler == "oversample" and config.wce:
        return GroupSampler(ds.y, conflicting, lambda_up, config.batch_size, rng)
    return UniformSampler(len(ds), config.batch_size, rng)


def _debias_value(net, x, y, conflicting, weights: LossWeights, config: ExperimentConfig):
    """Classification term (WCE, or CE with the wce toggle off) plus the
    weighted alignment term."""
    hidden, logits = net(x)
    if config.wce:
        total = wce_from_logits(logits, y, conflicting, weights.lambda_up,
                                oversampled=config.sampler == "oversample")
    else:
        total = ce(logits, y)
    if weights.lambda_align > 0:
        a, _ = alignment_from_hidden(hidden, y, conflicting, weights.tau)
        total = ad.add(total, ad.scale(a, weights.lambda_align))
    return total


def _fresh_model(ds: bd.BiasedDataset, config: ExperimentConfig, rng) -> MaskedMLP:
    cfg = MLPConfig(ds.x.shape[1], ds.num_classes, config.hidden_dims)
    return init_weights(cfg, rng)


def mine_bias_conflicting(ds: bd.BiasedDataset, config: ExperimentConfig,
                          rng: np.random.Generator) -> MiningResult:
    """Train a bias-capturing model and flag the samples it misclassifies."""
    model = _fresh_model(ds, config, rng)
    if config.mining == "gce":
        train_weights(model, ds, config.t1, config, rng, loss="gce")
    else:
        train_weights(model, ds, config.erm_mining_iters, config, rng, loss="ce")
    wrong = model.predict(ds.x) != ds.y
    bc, ba = np.flatnonzero(wrong), np.flatnonzero(~wrong)
    precision, recall = mining_scores(bc, ds.conflicting)
    if precision is None:
        log.info("mining: no sample flagged; precision undefined")
    return MiningResult(bc, ba, precision, recall)


def pretrain(ds: bd.BiasedDataset, config: ExperimentConfig, rng: np.random.Generator,
             history: list | None = None) -> MaskedMLP:
    """Plain ERM from a fresh initialisation."""
    model = _fresh_model(ds, config, rng)
    losses = train_weights(model, ds, config.pretrain_iters, config, rng, loss="ce")
    if history is not None:
        history.extend(losses)
    return model


def train_pruning_params(model: MaskedMLP, ds: bd.BiasedDataset, mining: MiningResult | None,
                         config: ExperimentConfig, rng: np.random.Generator,
                         history: list | None = None) -> PruningParams:
    """Learn keep-logits for the frozen weights of ``model``.

    dcwp: debias loss (WCE and/or alignment per the toggles) plus L1;
    mrm: CE plus L1.  One mask is sampled per iteration.
    """
    params = PruningParams.like(model.weights, config.theta_init)
    opt = Optimizer("adam", config.theta_lr)
    frozen_w = [ad.Tensor(w) for w in model.weights]
    frozen_b = [ad.Tensor(b) for b in model.biases]
    mrm = config.method == "mrm"
    weights = config.loss_weights()
    if mrm:
        sampler = UniformSampler(len(ds), config.batch_size, rng)
        conflicting = None
    else:
        conflicting = mining.conflicting
        sampler = _debias_sampler(ds, conflicting, weights.lambda_up, config, rng)
    for _ in range(config.t2):
        idx = sampler.draw()
        x, y = ds.x[idx], ds.y[idx]

        def objective(*logits):
            sample = sample_mask(logits, config.gumbel_tau, rng)
            net = functools.partial(apply, weights=frozen_w, biases=frozen_b, masks=sample.masks)
            if mrm:
                task = ce(net(x)[1], y)
            else:
                task = _debias_value(net, x, y, conflicting[idx], weights, config)
            return ad.add(task, l1_penalty(logits, config.lambda_l1))

        value, grads = ad.value_and_grad(objective, *params.logits)
        opt.step(params.logits, grads)
        if history is not None:
            history.append(value)
    return params


def prune_and_finetune(model: MaskedMLP, params: PruningParams | None, ds: bd.BiasedDataset,
                       mining: MiningResult | None, config: ExperimentConfig,
                       rng: np.random.Generator, reset_rng: np.random.Generator | None = None,
                       history: list | None = None) -> MaskedMLP:
    """Apply the binarized mask (if any) to a copy of ``model`` and finetune
    the surviving weights."""
    out = model.copy()
    if params is not None:
        mask = binarize(params)
        if all(not m.any() for m in mask):
            raise ValueError("every weight was pruned; nothing left to finetune")
        out.set_mask(mask)
    if config.reset:
        fresh = init_weights(out.config, reset_rng if reset_rng is not None else rng)
        out.weights, out.biases = fresh.weights, fresh.biases
    if config.method == "mrm" or not (config.wce or config.alignment):
        losses = train_weights(out, ds, config.t3, config, rng, loss="ce", lr=config.ft_lr)
    else:
        losses = train_weights(out, ds, config.t3, config, rng, loss="debias",
                               conflicting=mining.conflicting,
                               weights=config.loss_weights(finetune=True), lr=config.ft_lr)
    if history is not None:
        history.extend(losses)
    return out


# ---------------------------------------------------------------- evaluation


def evaluate(model: MaskedMLP, test: bd.BiasedDataset, mining: MiningResult | None = None,
             timings: dict | None = None) -> MetricsReport:
    """Accuracy over (class, bias attribute) cells.

    Unbiased accuracy averages the non-empty cells; worst-group accuracy is
    the minimum over them.  Aligned/conflicting accuracies are per-sample
    means over the respective groups (None when a group is empty).
    """
    pred = model.predict(test.x)
    correct = pred == test.y
    cells = []
    for c in range(test.num_classes):
        for b in np.unique(test.bias):
            sel = (test.y == c) & (test.bias == b)
            if sel.any():
                cells.append(correct[sel].mean())
    if not cells:
        raise ValueError("empty test set")
    group = lambda sel: float(correct[sel].mean()) if sel.any() else None
    return MetricsReport(
        unbiased_accuracy=float(np.mean(cells)),
        conflict_accuracy=group(test.conflicting),
        aligned_accuracy=group(test.aligned),
        worst_group_accuracy=float(np.min(cells)),
        mining_precision=None if mining is None else mining.precision,
        mining_recall=None if mining is None else mining.recall,
        pruning_ratio=None if model.mask is None else pruning_ratio(model.mask),
        timings=dict(timings or {}),
    )


# -------------------------------------------------------------- experiments


@dataclass
class ExperimentResult:
    report: MetricsReport
    model: MaskedMLP
    mining: MiningResult | None
    params: PruningParams | None


PRETRAIN_KEYS = ("dataset", "ratio", "n_train", "n_test", "num_classes", "spurious_dim", "inv_dim",
                 "inv_noise", "sp_flip", "code_seed", "data_dir", "hidden_dims", "batch_size",
                 "optimizer", "lr", "pretrain_iters", "seed")
MINING_KEYS = PRETRAIN_KEYS + ("t1", "erm_mining_iters", "q", "mining")


def _key(config, keys):
    return tuple((k, getattr(config, k)) for k in keys)


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   cache: dict | None = None) -> ExperimentResult:
    """Run the stage sequence for ``config.method`` and the ablation toggles.

    ``cache`` may be shared between calls to reuse data, mining and
    pretraining that depend only on identical settings.  Every stage draws
    from its own seeded stream, so results do not depend on cache hits.
    """
    cache = {} if cache is None else cache
    rngs = stage_rngs(config.seed)
    timings = {}

    def timed(name, fn):
        start = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - start
        return out

    pre_key = ("pretrain",) + _key(config, PRETRAIN_KEYS)
    if pre_key not in cache:
        train, test = timed("data", lambda: load_data(config, rngs["data"]))
        model = timed("pretrain", lambda: pretrain(train, config, rngs["pretrain"]))
        cache[pre_key] = (train, test, model)
    train, test, pretrained = cache[pre_key]

    mining = None
    if config.method == "dcwp":
        mine_key = ("mining",) + _key(config, MINING_KEYS)
        if mine_key not in cache:
            cache[mine_key] = timed("mining", lambda: mine_bias_conflicting(train, config, rngs["mining"]))
        mining = cache[mine_key]

    params = None
    model = pretrained
    if config.method == "mrm" or (config.method == "dcwp" and config.pruning):
        params = timed("theta", lambda: train_pruning_params(pretrained, train, mining, config,
                                                             rngs["theta"]))
    if config.method != "erm":
        model = timed("finetune", lambda: prune_and_finetune(pretrained, params, train, mining,
                                                             config, rngs["finetune"],
                                                             rngs["reset"]))
    report = evaluate(model, test, mining, timings)
    if out_dir is not None:
        write_artifacts(Path(out_dir), config, report, model)
    return ExperimentResult(report, model, mining, params)


def write_artifacts(out_dir: Path, config: ExperimentConfig, report: MetricsReport,
                    model: MaskedMLP) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": save_checkpoint(model, out_dir / "model.ckpt", seed=config.seed,
                                           extra={"method": config.method})}
    if model.mask is not None:
        paths["mask"], _ = export_mask(model.mask, out_dir / "mask")
    paths["metrics"] = out_dir / "metrics.json"
    paths["metrics"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return paths
