"""Losses used by the debiasing pipeline.

Model-level functions take ``net``: any callable mapping a batch of inputs to
``(penultimate, logits)`` tensors, typically ``functools.partial(models.apply,
weights=..., biases=..., masks=...)`` with one mask sample bound for the step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .masking import l1_penalty

log = logging.getLogger(__name__)

Net = Callable[[np.ndarray], tuple[ad.Tensor, ad.Tensor]]

UNIT_NORM_TOL = 1e-6


@dataclass
class LossWeights:
    lambda_up: float = 80.0
    lambda_align: float = 0.05
    lambda_l1: float = 1e-8
    q: float = 0.7
    tau: float = 0.1

    def __post_init__(self):
        if self.lambda_up < 1:
            raise ValueError(f"lambda_up must be >= 1, got {self.lambda_up}")
        if self.lambda_align < 0:
            raise ValueError(f"lambda_align must be >= 0, got {self.lambda_align}")
        if self.lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if not 0 < self.q <= 1:
            raise ValueError(f"GCE q must lie in (0, 1], got {self.q}")
        if self.tau <= 0:
            raise ValueError(f"contrastive temperature must be positive, got {self.tau}")


@dataclass
class GroupedBatch:
    """Inputs, targets and the mined bias-conflicting flag of each row.

    Rows with ``conflicting`` set form S_bc; the rest form S_ba.
    """

    x: np.ndarray
    y: np.ndarray
    conflicting: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.intp)
        self.conflicting = np.asarray(self.conflicting, dtype=bool)
        if not (len(self.x) == len(self.y) == len(self.conflicting)):
            raise ValueError("x, y and conflicting flags differ in length")

    @property
    def bc(self) -> np.ndarray:
        return np.flatnonzero(self.conflicting)

    @property
    def ba(self) -> np.ndarray:
        return np.flatnonzero(~self.conflicting)


def _check_labels(logits: ad.Tensor, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ad.ShapeError(f"logits {logits.shape} do not match labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    return y


def per_sample_ce(logits, y) -> ad.Tensor:
    logits = ad.as_tensor(logits)
    y = _check_labels(logits, y)
    return ad.scale(ad.pick(ad.log_softmax(logits), y), -1.0)


def ce(logits, y) -> ad.Tensor:
    """Mean cross-entropy."""
    return ad.mean(per_sample_ce(logits, y))


def gce(logits, y, q: float) -> ad.Tensor:
    """Mean generalized cross-entropy ``(1 - p_y^q) / q``."""
    if not 0 < q <= 1:
        raise ValueError(f"GCE q must lie in (0, 1], got {q}")
    logits = ad.as_tensor(logits)
    y = _check_labels(logits, y)
    p_q = ad.exp(ad.scale(ad.pick(ad.log_softmax(logits), y), q))
    return ad.scale(ad.sub(1.0, ad.mean(p_q)), 1.0 / q)


def wce_from_logits(logits, y, conflicting, lambda_up: float,
                    oversampled: bool = False) -> ad.Tensor:
    """``lambda_up * mean CE(S_bc) + mean CE(S_ba)``.

    With ``oversampled`` the rows are assumed drawn from the group mixture
    P(S_bc) = lambda_up / (1 + lambda_up), and the unbiased estimate
    ``(1 + lambda_up) * mean CE`` over the batch is returned instead.
    """
    losses = per_sample_ce(logits, y)
    if oversampled:
        return ad.scale(ad.mean(losses), 1.0 + lambda_up)
    conflicting = np.asarray(conflicting, dtype=bool)
    bc, ba = np.flatnonzero(conflicting), np.flatnonzero(~conflicting)
    total = ad.Tensor(0.0)
    if bc.size:
        total = ad.add(total, ad.scale(ad.mean(ad.take_rows(losses, bc)), lambda_up))
    else:
        log.debug("wce: empty bias-conflicting group in batch")
    if ba.size:
        total = ad.add(total, ad.mean(ad.take_rows(losses, ba)))
    else:
        log.debug("wce: empty bias-aligned group in batch")
    return total


def wce(batch: GroupedBatch, net: Net, lambda_up: float, oversampled: bool = False) -> ad.Tensor:
    _, logits = net(batch.x)
    return wce_from_logits(logits, batch.y, batch.conflicting, lambda_up, oversampled)


def supcon(z, y, anchors, positives, tau: float, pool=None) -> tuple[ad.Tensor, int]:
    """Supervised contrastive loss summed over anchors.

    For anchor i the positives are members of ``positives`` with label y_i
    (excluding i); the softmax denominator runs over ``pool`` minus i, where
    ``pool`` defaults to ``anchors | positives``.  Anchors without positives
    are skipped.  Returns ``(loss, skipped_anchor_count)``.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = ad.as_tensor(z)
    y = np.asarray(y, dtype=np.intp)
    n = z.shape[0]
    if z.ndim != 2 or y.shape != (n,):
        raise ad.ShapeError(f"embeddings {z.shape} do not match labels {y.shape}")
    norms = np.linalg.norm(z.data, axis=1)
    if n and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise ValueError("supcon expects unit-norm embeddings")

    anchors = np.unique(np.asarray(anchors, dtype=np.intp))
    positives = np.unique(np.asarray(positives, dtype=np.intp))
    in_pos = np.zeros(n, dtype=bool)
    in_pos[positives] = True
    in_pool = np.zeros(n, dtype=bool)
    if pool is None:
        in_pool[anchors] = True
        in_pool[positives] = True
    else:
        in_pool[np.asarray(pool, dtype=np.intp)] = True
        if not np.all(in_pool[positives]):
            raise ValueError("every positive must belong to the denominator pool")

    pos = in_pos[None, :] & (y[anchors][:, None] == y[None, :])
    pos[np.arange(anchors.size), anchors] = False
    counts = pos.sum(axis=1)
    active = counts > 0
    skipped = int(anchors.size - active.sum())
    if not active.any():
        return ad.Tensor(0.0), skipped

    rows = anchors[active]
    pos, counts = pos[active], counts[active]
    denom = np.broadcast_to(in_pool, (rows.size, n)).copy()
    denom[np.arange(rows.size), rows] = False

    sim = ad.scale(ad.matmul(ad.take_rows(z, rows), ad.transpose(z)), 1.0 / tau)
    logp = ad.log_softmax(sim, mask=denom)
    weights = pos / counts[:, None]
    return ad.scale(ad.sum(ad.mul(logp, weights)), -1.0), skipped


def alignment_from_hidden(hidden, y, conflicting, tau: float) -> tuple[ad.Tensor, int]:
    """``supcon(S_bc, S) + supcon(S_ba, S_bc)`` on normalised embeddings.

    Rows whose penultimate activation is exactly zero have no direction and
    are dropped; they are counted as skipped.
    """
    hidden = ad.as_tensor(hidden)
    conflicting = np.asarray(conflicting, dtype=bool)
    y = np.asarray(y, dtype=np.intp)
    live = np.flatnonzero(np.linalg.norm(hidden.data, axis=1) > 0)
    dropped = hidden.shape[0] - live.size
    if live.size == 0:
        return ad.Tensor(0.0), dropped
    z = ad.l2_normalize(ad.take_rows(hidden, live))
    y, conflicting = y[live], conflicting[live]
    everyone = np.arange(live.size)
    bc, ba = np.flatnonzero(conflicting), np.flatnonzero(~conflicting)
    first, skip1 = supcon(z, y, bc, everyone, tau)
    second, skip2 = supcon(z, y, ba, bc, tau)
    return ad.add(first, second), dropped + skip1 + skip2


def alignment(batch: GroupedBatch, net: Net, tau: float) -> tuple[ad.Tensor, int]:
    hidden, _ = net(batch.x)
    return alignment_from_hidden(hidden, batch.y, batch.conflicting, tau)


@dataclass
class DebiasTerms:
    total: ad.Tensor
    wce: float
    align: float
    skipped: int


def debias_loss(batch: GroupedBatch, net: Net, weights: LossWeights,
                oversampled: bool = False, lambda_up: float | None = None) -> DebiasTerms:
    """``wce + lambda_align * alignment`` from a single forward pass."""
    lam_up = weights.lambda_up if lambda_up is None else lambda_up
    hidden, logits = net(batch.x)
    w = wce_from_logits(logits, batch.y, batch.conflicting, lam_up, oversampled)
    if weights.lambda_align == 0:
        return DebiasTerms(w, w.item(), 0.0, 0)
    a, skipped = alignment_from_hidden(hidden, batch.y, batch.conflicting, weights.tau)
    total = ad.add(w, ad.scale(a, weights.lambda_align))
    return DebiasTerms(total, w.item(), a.item(), skipped)


def mrm_objective(x, y, net: Net, logits_params: Sequence, lambda_l1: float) -> ad.Tensor:
    """Plain CE over the batch plus the L1 penalty on the pruning logits."""
    _, logits = net(x)
    return ad.add(ce(logits, y), l1_penalty(logits_params, lambda_l1))
