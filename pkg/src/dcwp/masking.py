"""Pruning logits, Gumbel-sigmoid mask sampling, binarization and sparsity."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_INIT_LOGIT = 1.5
DEFAULT_GUMBEL_TAU = 0.5


@dataclass
class PruningParams:
    """One keep-logit per prunable weight entry; keep-probability is sigmoid(logit)."""

    logits: list[np.ndarray]

    @classmethod
    def like(cls, weights: Sequence[np.ndarray], init: float = DEFAULT_INIT_LOGIT) -> PruningParams:
        return cls([np.full(np.shape(w), float(init)) for w in weights])

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.logits]

    def keep_probabilities(self) -> list[np.ndarray]:
        return [1.0 / (1.0 + np.exp(-t)) for t in self.logits]

    def copy(self) -> PruningParams:
        return PruningParams([t.copy() for t in self.logits])


@dataclass
class MaskSample:
    """Hard {0,1} masks whose gradients flow through relaxed values.

    ``masks`` are the tensors to multiply into the weights.  ``relaxed`` keeps
    the plain relaxed values for inspection.
    """

    masks: list[ad.Tensor]
    relaxed: list[np.ndarray]
    tau: float

    @property
    def hard(self) -> list[np.ndarray]:
        return [np.asarray(m.data) for m in self.masks]


def sample_mask(logits: Sequence, tau: float, rng: np.random.Generator,
                hard: bool = True) -> MaskSample:
    """Draw one binary-concrete mask per logit tensor.

    ``logits`` may be tape leaves (for training) or arrays.  With ``hard``
    the forward value is 1[relaxed > 1/2] and the gradient is that of the
    relaxed value (straight-through); otherwise the relaxed value is used.
    """
    if tau <= 0:
        raise ValueError(f"Gumbel temperature must be positive, got {tau}")
    masks, relaxed = [], []
    for theta in logits:
        theta = ad.as_tensor(theta)
        u = rng.uniform(size=theta.shape)
        # u == 0 has probability ~2^-53; clip keeps the logistic noise finite
        u = np.clip(u, 1e-12, 1 - 1e-12)
        noise = np.log(u) - np.log1p(-u)
        soft = ad.sigmoid(ad.scale(ad.add(theta, noise), 1.0 / tau))
        relaxed.append(np.array(soft.data))
        if hard:
            masks.append(ad.straight_through(soft.data > 0.5, soft))
        else:
            masks.append(soft)
    return MaskSample(masks, relaxed, float(tau))


def binarize(params: PruningParams | Sequence[np.ndarray]) -> list[np.ndarray]:
    """Final keep mask: 1 where the logit is strictly positive."""
    logits = params.logits if isinstance(params, PruningParams) else params
    return [(np.asarray(t) > 0).astype(np.float64) for t in logits]


def l1_penalty(logits: Sequence, lam: float) -> ad.Tensor:
    """``lam * sum |theta|`` over every logit tensor."""
    if lam < 0:
        raise ValueError("l1 coefficient must be non-negative")
    total = None
    for theta in logits:
        term = ad.sum(ad.abs(ad.as_tensor(theta)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.Tensor(0.0)
    return ad.scale(total, lam)


def pruning_ratio(mask: Sequence[np.ndarray]) -> float:
    """Fraction of zero entries across all layers."""
    entries = int(np.sum([np.size(m) for m in mask]))
    if entries == 0:
        raise ValueError("pruning ratio of an empty mask is undefined")
    zeros = int(np.sum([np.count_nonzero(np.asarray(m) == 0) for m in mask]))
    return zeros / entries


def export_mask(mask: Sequence[np.ndarray], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (one 0/1 byte per entry, layers concatenated in
    row-major order) and ``<path>.json`` with layer shapes and byte offsets.
    """
    path = Path(path)
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    layers, offset, chunks = [], 0, []
    for m in mask:
        b = (np.asarray(m) != 0).astype(np.uint8).reshape(-1)
        layers.append({"shape": list(np.shape(m)), "offset": offset, "count": int(b.size)})
        offset += b.size
        chunks.append(b.tobytes())
    bin_path.write_bytes(b"".join(chunks))
    sidecar = {"format": "dcwp-mask-v1", "layers": layers, "total": offset,
               "pruning_ratio": pruning_ratio(mask)}
    json_path.write_text(json.dumps(sidecar, indent=2))
    return bin_path, json_path


def load_mask(path: str | Path) -> list[np.ndarray]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=np.uint8)
    if raw.size != meta["total"]:
        raise ValueError(f"mask blob has {raw.size} bytes, sidecar expects {meta['total']}")
    return [raw[l["offset"]:l["offset"] + l["count"]].reshape(l["shape"]).astype(np.float64)
            for l in meta["layers"]]
