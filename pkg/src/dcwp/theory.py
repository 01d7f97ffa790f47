"""Numerical checks on the binary spurious-feature model.

Everything here concerns a linear classifier ``sgn(w_inv*Z_inv + w_sp . Z_sp)``
whose inputs are randomly dropped with keep probabilities ``pi``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import BinaryEnvSpec, sample_binary_env

# --------------------------------------------------------------- basic types


@dataclass
class PruneProbabilities:
    """Keep probabilities of the invariant input and each spurious input."""

    pi_inv: float
    pi_sp: np.ndarray

    def __post_init__(self):
        self.pi_sp = np.atleast_1d(np.asarray(self.pi_sp, dtype=np.float64))
        if not 0 <= self.pi_inv <= 1 or np.any((self.pi_sp < 0) | (self.pi_sp > 1)):
            raise ValueError("keep probabilities must lie in [0, 1]")

    @classmethod
    def shared(cls, pi_inv: float, pi_sp: float, D: int) -> PruneProbabilities:
        return cls(pi_inv, np.full(D, float(pi_sp)))


@dataclass
class MCEstimate:
    mean: float
    se: float
    n: int


# ---------------------------------------------------------- losses and bounds


def _score(x: np.ndarray, m: np.ndarray, w_inv: float, w_sp: np.ndarray) -> np.ndarray:
    w = np.concatenate([[w_inv], w_sp])
    return (x * m) @ w


def mc_loss(pi: PruneProbabilities, w_inv: float, w_sp, spec: BinaryEnvSpec, n: int,
            rng: np.random.Generator) -> MCEstimate:
    """Monte-Carlo estimate of E[(1 - y sgn(w . (x*m))) / 2] with fresh masks
    per sample.  A zero score predicts nothing and costs 1/2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    w_sp = np.asarray(w_sp, dtype=np.float64)
    if w_sp.shape != (spec.D,) or pi.pi_sp.shape != (spec.D,):
        raise ValueError(f"expected {spec.D} spurious weights and keep probabilities")
    ds = sample_binary_env(spec, n, rng)
    keep = np.concatenate([[pi.pi_inv], pi.pi_sp])
    m = rng.random(ds.x.shape) < keep
    losses = 0.5 * (1 - ds.y * np.sign(_score(ds.x, m, w_inv, w_sp)))
    se = losses.std(ddof=1) / np.sqrt(n) if n > 1 else float("inf")
    return MCEstimate(float(losses.mean()), float(se), n)


def exact_loss(pi: PruneProbabilities, w_inv: float, w_sp, spec: BinaryEnvSpec,
               max_states: int = 1 << 22) -> float:
    """The same expectation by enumeration.

    Each spurious input contributes +w (kept, agrees with y), -w (kept,
    disagrees) or 0 (dropped); inputs with keep probability 0 or 1 have fewer
    states.  Raises when the state space exceeds ``max_states``.
    """
    w_sp = np.asarray(w_sp, dtype=np.float64)
    agree = spec.agree_probability
    per_dim = []
    for w, k in zip(w_sp, pi.pi_sp):
        states = [(w, k * agree), (-w, k * (1 - agree)), (0.0, 1 - k)]
        per_dim.append([(v, q) for v, q in states if q > 0])
    inv_states = [(v, q) for v, q in ((w_inv, pi.pi_inv), (0.0, 1 - pi.pi_inv)) if q > 0]
    total = len(inv_states) * int(np.prod([len(s) for s in per_dim]))
    if total > max_states:
        raise ValueError(f"{total} states exceed the enumeration limit {max_states}")
    # margins y*score, accumulated dimension by dimension
    vals, probs = np.array([v for v, _ in inv_states]), np.array([q for _, q in inv_states])
    for states in per_dim:
        v = np.array([s for s, _ in states])
        q = np.array([s for _, s in states])
        vals = (vals[:, None] + v[None, :]).ravel()
        probs = (probs[:, None] * q[None, :]).ravel()
    return float(np.sum(probs * 0.5 * (1 - np.sign(vals))))


def _bound(pi: PruneProbabilities, alpha, c: float) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != pi.pi_sp.shape:
        raise ValueError("alpha and pi_sp must have the same length")
    num = pi.pi_inv + c * np.dot(alpha, pi.pi_sp)
    return float(2 * np.exp(-2 * num ** 2 / (4 * np.dot(alpha, alpha) + 1)))


def training_bound(pi: PruneProbabilities, alpha, p: float) -> float:
    """Hoeffding bound on the loss in a training environment of strength p."""
    return _bound(pi, alpha, 2 * p - 1)


def test_bound(pi: PruneProbabilities, alpha) -> float:
    """Bound in the environment where spurious inputs are independent of y."""
    return _bound(pi, alpha, 0.0)


test_bound.__test__ = False  # keep pytest from collecting this as a test


def mixture_bound(pi: PruneProbabilities, alpha, p: float, phi: float) -> float:
    """Bound under the mixture that flips spurious inputs with weight ``phi``."""
    return _bound(pi, alpha, 2 * p * (1 - phi) - 1)


# ------------------------------------------------------------ gradient flow


class FlowDivergenceError(ArithmeticError):
    def __init__(self, t: float):
        super().__init__(f"gradient flow produced a non-finite state at t={t:.6g}")
        self.t = t


@dataclass
class LinearClassifierState:
    w_inv: float
    w_sp: np.ndarray
    t: float


@dataclass
class Trajectory:
    """States at the requested times plus the terminal state."""

    t: np.ndarray
    w_inv: np.ndarray
    w_sp: np.ndarray          # (len(t), D)
    final: LinearClassifierState
    steps: int
    converged: bool

    @property
    def alpha(self) -> np.ndarray:
        return self.w_sp / self.w_inv[:, None]


def fixed_point(p: float) -> float:
    """Limit of every spurious weight."""
    return 0.5 * np.log(p / (1 - p))


def _a_b(p, w_sp):
    a = p * np.exp(-w_sp) + (1 - p) * np.exp(w_sp)
    b = p * np.exp(-w_sp) - (1 - p) * np.exp(w_sp)
    return a, b


def _rates(p, w_sp):
    """(prod_i A_i, B_j prod_{i != j} A_i) with A/B the symmetric and
    antisymmetric spurious factors.  Both are d/ds of the weights under the
    intrinsic clock ds = exp(-w_inv) dt."""
    a, b = _a_b(p, w_sp)
    prod = np.prod(a)
    return prod, b * prod / a


def _intrinsic_rhs(p, y):
    # y = (w_inv, t, w_sp...)
    prod, dsp = _rates(p, y[2:])
    return np.concatenate([[prod, np.exp(y[0])], dsp])


def _physical_rhs(p, y):
    # y = (w_inv, t, w_sp...)
    prod, dsp = _rates(p, y[2:])
    scale = np.exp(-y[0])
    return np.concatenate([[scale * prod, 1.0], scale * dsp])


def _rk4(f, p, y, h):
    k1 = f(p, y)
    k2 = f(p, y + 0.5 * h * k1)
    k3 = f(p, y + 0.5 * h * k2)
    k4 = f(p, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def gradient_flow(p: float, D: int, w_inv0: float = 0.1, w_sp0=0.0, horizon: float | None = None,
                  times: Iterable[float] = (), step: float | None = None,
                  clock: str = "intrinsic", tol: float = 1e-4,
                  max_steps: int = 5_000_000) -> Trajectory:
    """Fixed-step RK4 for the exponential-loss gradient flow

        dw_inv/dt  = exp(-w_inv) prod_i A_i
        dw_sp,j/dt = exp(-w_inv) B_j prod_{i != j} A_i

    with A_i = p e^{-w_i} + (1-p) e^{w_i} and B_i = p e^{-w_i} - (1-p) e^{w_i}.

    ``clock="intrinsic"`` (default) steps uniformly in s with ds = e^{-w_inv} dt
    and carries t as a state variable; ``"physical"`` steps uniformly in t.
    Because w_inv grows like log t, spurious weights converge only as a power
    of t, so physical steps need on the order of 1/tol^k iterations where the
    intrinsic clock needs a few thousand.  The default intrinsic step scales
    inversely with the initial rate prod_i A_i(w_sp(0)).

    States are reported exactly at ``times`` (a partial step is solved for by
    bisection).  Without ``horizon`` the run stops once the linearised
    distance to the fixed point, |dw_sp/ds| / prod A_i(w*), is below ``tol``.
    """
    if not 0.5 <= p < 1:
        raise ValueError(f"p must lie in [0.5, 1), got {p}")
    if clock not in ("intrinsic", "physical"):
        raise ValueError(f"unknown clock {clock!r}")
    if clock == "physical" and horizon is None:
        raise ValueError("the physical clock needs an explicit horizon")
    w_sp0 = np.broadcast_to(np.asarray(w_sp0, dtype=np.float64), (D,)).copy()
    w_star = fixed_point(p)
    if w_inv0 < 0 or np.any(w_sp0 < 0) or np.any(w_sp0 > w_star + 1e-15):
        raise ValueError("initialisation must satisfy w_inv >= 0 and 0 <= w_sp <= w*")
    if step is None:
        # the flow's Jacobian in s is bounded by (1 + D) prod A_i, largest at s = 0
        step = 0.1 / ((1 + D) * _rates(p, w_sp0)[0]) if clock == "intrinsic" else 1e-3
    f = _intrinsic_rhs if clock == "intrinsic" else _physical_rhs
    targets = sorted(float(t) for t in times)
    if horizon is not None:
        targets = [t for t in targets if t <= horizon]
    rate_at_fixed = (4 * p * (1 - p)) ** (D / 2)

    y = np.concatenate([[w_inv0, 0.0], w_sp0])
    out = []
    ti = 0
    while ti < len(targets) and targets[ti] <= 0:
        out.append(y.copy())
        ti += 1
    steps, converged = 0, False
    while True:
        y_next = _rk4(f, p, y, step)
        steps += 1
        if not np.all(np.isfinite(y_next)):
            raise FlowDivergenceError(float(y[1]))
        while ti < len(targets) and y_next[1] >= targets[ti]:
            out.append(_hit_time(f, p, y, step, targets[ti]))
            ti += 1
        if horizon is not None and y_next[1] >= horizon:
            y = _hit_time(f, p, y, step, horizon)
            break
        y = y_next
        if horizon is None:
            _, dsp = _rates(p, y[2:])
            if np.max(np.abs(dsp)) / rate_at_fixed < tol and ti == len(targets):
                converged = True
                break
        if steps >= max_steps:
            raise RuntimeError(f"gradient flow did not finish within {max_steps} steps (t={y[1]:.4g})")
    if horizon is not None:
        converged = bool(np.max(np.abs(_rates(p, y[2:])[1])) / rate_at_fixed < tol)
    pts = np.array(out) if out else np.zeros((0, D + 2))
    return Trajectory(t=pts[:, 1], w_inv=pts[:, 0], w_sp=pts[:, 2:],
                      final=LinearClassifierState(float(y[0]), y[2:].copy(), float(y[1])),
                      steps=steps, converged=converged)


def _hit_time(f, p, y, h, target, iters: int = 200):
    """RK4 partial step from ``y`` whose time component equals ``target``."""
    lo, hi = 0.0, h
    if y[1] == target:
        return y.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _rk4(f, p, y, mid)[1] < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(h, 1.0):
            break
    z = _rk4(f, p, y, hi)
    z[1] = target
    return z


@dataclass
class Envelopes:
    w_inv_lower: np.ndarray
    w_inv_upper: np.ndarray
    w_sp_lower: np.ndarray     # (len(t), D)
    alpha_lower: np.ndarray    # (len(t), D)


def analytic_envelopes(p: float, D: int, w_inv0: float, w_sp0, t) -> Envelopes:
    """Closed-form bounds on the flow for 0 < w_inv(0) and 0 < w_sp(0) < w*.

    The spurious lower bound at time t freezes w_inv at its upper envelope at
    t, which bounds it from above on all of [0, t].
    """
    if not 0.5 < p < 1:
        raise ValueError(f"p must lie in (0.5, 1), got {p}")
    w_sp0 = np.broadcast_to(np.asarray(w_sp0, dtype=np.float64), (D,))
    if w_inv0 <= 0 or np.any(w_sp0 <= 0) or np.any(w_sp0 >= fixed_point(p)):
        raise ValueError("envelopes need 0 < w_inv(0) and 0 < w_sp(0) < w*")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    q = p * (1 - p)
    lower = np.log(np.exp(w_inv0) + (4 * q) ** (D / 2) * t)
    upper = np.log(np.exp(w_inv0) + t * np.prod(p * np.exp(-w_sp0) + np.sqrt(q)))
    speed = np.exp(-upper) * 2 ** (D - 1) * q ** (D / 2)
    start = np.arctanh(np.sqrt((1 - p) / p) * np.exp(w_sp0))
    sp_lower = fixed_point(p) + np.log(np.tanh(start[None, :] + (speed * t)[:, None]))
    return Envelopes(lower, upper, sp_lower, sp_lower / upper[:, None])


# ------------------------------------------------------ weight-ratio training


@dataclass
class RatioResult:
    p: float
    alpha_mean: float
    alpha_se: float
    unbiased_accuracy: float
    alphas: np.ndarray = field(repr=False)


def train_linear_bce(spec: BinaryEnvSpec, seeds: Sequence[int], n_train: int = 8192,
                     epochs: int = 500, batch: int = 1024, lr: float = 0.1,
                     optimizer: str = "sgd") -> np.ndarray:
    """Train one bias-free linear classifier per seed with binary cross-entropy
    on labels mapped to {0, 1}.  Returns weights of shape (len(seeds), D+1)."""
    S, d = len(seeds), spec.D + 1
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([sample_binary_env(spec, n_train, r).x for r in rngs])           # (S, n, d)
    y01 = (x[:, :, 0] + 1) / 2                                                     # Z_inv = y
    bound = 1 / np.sqrt(d)
    w = np.stack([r.uniform(-bound, bound, size=d) for r in rngs])
    m, v = np.zeros_like(w), np.zeros_like(w)
    b1, b2, k = 0.9, 0.999, 0
    for _ in range(epochs):
        perms = np.stack([r.permutation(n_train) for r in rngs])
        xe = x[np.arange(S)[:, None], perms]
        ye = y01[np.arange(S)[:, None], perms]
        for start in range(0, n_train, batch):
            xb, yb = xe[:, start:start + batch], ye[:, start:start + batch]
            z = np.einsum("snd,sd->sn", xb, w)
            g = np.einsum("sn,snd->sd", expit(z) - yb, xb) / xb.shape[1]
            k += 1
            if optimizer == "adam":
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                w = w - lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + 1e-8)
            else:
                w = w - lr * g
    return w


def bce_loss(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of a linear classifier, labels in {-1, 1}."""
    return float(-np.mean(log_expit(y * (x @ w))))


def linear_accuracy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Accuracy with ties counted as half correct."""
    return float(np.mean(0.5 * (1 + y * np.sign(x @ w))))


def weight_ratio_experiment(p_grid: Sequence[float] = (0.6, 0.7, 0.8, 0.9, 0.99), D: int = 15,
                            epochs: int = 500, batch: int = 1024, seeds: int | Sequence[int] = 15,
                            n_train: int = 8192, n_test: int = 20_000, lr: float = 0.1,
                            optimizer: str = "sgd", seed: int = 0) -> list[RatioResult]:
    """Mean spurious-to-invariant weight ratio after BCE training, per p,
    together with accuracy in the unbiased environment."""
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    test = sample_binary_env(BinaryEnvSpec(0.5, D), n_test, np.random.default_rng(seed))
    results = []
    for j, p in enumerate(p_grid):
        if not 0.5 < p < 1:
            raise ValueError(f"p must lie in (0.5, 1), got {p}")
        cell_seeds = [seed * 1_000_003 + 1000 * j + s for s in seed_list]
        w = train_linear_bce(BinaryEnvSpec(p, D), cell_seeds, n_train, epochs, batch, lr, optimizer)
        alphas = w[:, 1:].mean(axis=1) / w[:, 0]
        acc = np.mean([linear_accuracy(wi, test.x, test.y) for wi in w])
        se = alphas.std(ddof=1) / np.sqrt(len(alphas)) if len(alphas) > 1 else 0.0
        results.append(RatioResult(p, float(alphas.mean()), float(se), float(acc), alphas))
    return results


# -------------------------------------------------------------- misalignment


@dataclass
class MisalignmentResult:
    cross_mean: float
    cross_se: float
    within_mean: float
    within_se: float
    expected_cross: float
    expected_within: float


def semi_orthogonal(Q: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Q x k matrix with orthonormal columns (W^T W = I)."""
    if Q < k:
        raise ValueError(f"cannot build a semi-orthogonal {Q}x{k} matrix with Q < {k}")
    q, r = np.linalg.qr(rng.standard_normal((Q, k)))
    return q * np.sign(np.diag(r))


def misalignment_experiment(D: int, p: float, Q: int, n_pairs: int,
                            rng: np.random.Generator) -> MisalignmentResult:
    """Mean cosine similarity of embeddings ``W x`` for same-class pairs, one
    drawn from the biased environment and one from the unbiased one (cross),
    and both from the biased environment (within)."""
    W = semi_orthogonal(Q, D + 1, rng)
    y = rng.choice(np.array([-1, 1]), size=n_pairs)

    def draw(pp):
        agree = rng.random((n_pairs, D)) < pp
        return np.column_stack([y, np.where(agree, 1, -1) * y[:, None]]).astype(np.float64)

    def cos(a, b):
        ea, eb = a @ W.T, b @ W.T
        return np.sum(ea * eb, axis=1) / (np.linalg.norm(ea, axis=1) * np.linalg.norm(eb, axis=1))

    biased, biased2, unbiased = draw(p), draw(p), draw(0.5)
    cross, within = cos(biased, unbiased), cos(biased, biased2)
    se = lambda v: float(v.std(ddof=1) / np.sqrt(len(v)))
    return MisalignmentResult(float(cross.mean()), se(cross), float(within.mean()), se(within),
                              1 / (D + 1), (1 + D * (2 * p - 1) ** 2) / (D + 1))


# --------------------------------------------------------------- bound grids

PI_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def pretrained_alpha(p: float, D: int, seed: int = 0, epochs: int = 50) -> np.ndarray:
    """Weight ratios of a linear classifier trained on the environment."""
    w = train_linear_bce(BinaryEnvSpec(p, D), [seed], epochs=epochs)[0]
    return w[1:] / w[0]


def bound_grid(p_values: Sequence[float] = (0.6, 0.75, 0.9, 0.99), D: int = 15, n: int = 100_000,
               seed: int = 0, pi_grid: Sequence[float] = PI_GRID, phi: float | str = "auto",
               alphas: dict | None = None) -> list[dict]:
    """One row per (p, pi_inv, pi_sp): Monte-Carlo loss in the training
    environment with its standard error and the three bounds.  ``phi="auto"``
    uses the weight that removes the spurious correlation."""
    rng = np.random.default_rng(seed)
    rows = []
    for p in p_values:
        alpha = alphas[p] if alphas else pretrained_alpha(p, D, seed)
        ph = 1 - 1 / (2 * p) if phi == "auto" else float(phi)
        spec = BinaryEnvSpec(p, D)
        for pi_inv, pi_sp in itertools.product(pi_grid, pi_grid):
            pi = PruneProbabilities.shared(pi_inv, pi_sp, D)
            est = mc_loss(pi, 1.0, alpha, spec, n, rng)
            rows.append({
                "p": p, "D": D, "pi_inv": pi_inv, "pi_sp": pi_sp, "phi": ph,
                "alpha_mean": float(np.mean(alpha)), "mc_loss": est.mean, "se": est.se,
                "training_bound": training_bound(pi, alpha, p),
                "test_bound": test_bound(pi, alpha),
                "mixture_bound": mixture_bound(pi, alpha, p, ph),
            })
    return rows


def write_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path
