"""Masked multilayer perceptron, optimizers and the checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad


@dataclass
class MLPConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (100, 100, 100)
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be >= 1")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be non-empty and >= 1, got {self.hidden_dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MaskedMLP:
    """``x @ (m_1*W_1) + b_1 -> relu -> ... -> (m_L*W_L) + b_L``.

    The encoder is everything up to the last hidden activation; the last layer
    is the classifier.  ``mask`` (one {0,1} array per weight, biases never
    masked) is applied in every forward pass when present.
    """

    config: MLPConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mask: list[np.ndarray] | None = None

    def __post_init__(self):
        shapes = self.config.layer_shapes
        if [w.shape for w in self.weights] != shapes:
            raise ValueError("weight shapes do not match the config")
        if self.mask is not None:
            self.set_mask(self.mask)

    def set_mask(self, mask: Sequence[np.ndarray] | None):
        if mask is not None:
            mask = [np.asarray(m, dtype=np.float64) for m in mask]
            if [m.shape for m in mask] != [w.shape for w in self.weights]:
                raise ValueError("mask shapes must equal weight shapes")
        self.mask = mask

    def copy(self) -> MaskedMLP:
        return MaskedMLP(self.config,
                         [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         None if self.mask is None else [m.copy() for m in self.mask])

    @property
    def num_weights(self) -> int:
        return int(sum(w.size for w in self.weights))

    def effective_weights(self) -> list[np.ndarray]:
        if self.mask is None:
            return self.weights
        return [w * m for w, m in zip(self.weights, self.mask)]

    # -- plain numpy inference

    def hidden(self, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.config.input_dim)
        weights = self.effective_weights()
        h = x
        for w, b in zip(weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        weights = self.effective_weights()
        return self.hidden(x) @ weights[-1] + self.biases[-1]

    def predict(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        out = [np.argmax(self.logits(x[i:i + batch_size]), axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm penultimate embeddings."""
        h = self.hidden(x)
        return ad.l2_normalize(h).numpy()


def _check_input(x, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ad.ShapeError(f"expected input of shape (n, {input_dim}), got {x.shape}")
    return x


def apply(x, weights: Sequence, biases: Sequence, masks: Sequence | None = None):
    """Differentiable forward pass returning ``(penultimate, logits)``.

    ``weights``/``biases``/``masks`` may be tape leaves, constants or arrays;
    gradients flow to whichever of them are leaves.
    """
    x = ad.as_tensor(x)
    weights = [ad.as_tensor(w) for w in weights]
    if x.ndim != 2 or x.shape[1] != weights[0].shape[0]:
        raise ad.ShapeError(f"input shape {x.shape} does not match the first layer")
    eff = list(weights) if masks is None else [ad.mul(w, m) for w, m in zip(weights, masks)]
    h = x
    for w, b in zip(eff[:-1], biases[:-1]):
        h = ad.relu(ad.add(ad.matmul(h, w), b))
    logits = ad.add(ad.matmul(h, eff[-1]), biases[-1])
    return h, logits


def init_weights(config: MLPConfig, rng: np.random.Generator) -> MaskedMLP:
    """Kaiming-uniform fan-in weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in config.layer_shapes:
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MaskedMLP(config, weights, biases)


# ---------------------------------------------------------------- optimizers


@dataclass
class Optimizer:
    """SGD or Adam over a fixed list of arrays, updated in place."""

    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list, repr=False)
    _v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise ad.ShapeError(f"gradient shape {np.shape(g)} != parameter {p.shape}")
        self.step_count += 1
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DCWPCKPT"


def save_checkpoint(model: MaskedMLP, path: str | Path, step: int = 0, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Binary layout::

        8 bytes   magic b"DCWPCKPT"
        u32 LE    header length H
        H bytes   UTF-8 JSON header: config, step, seed, extra, tensors
        ...       raw little-endian float64 blobs, in header order

    Each header tensor entry is ``{"name", "shape", "offset"}`` with the
    offset counted in bytes from the start of the blob section.
    """
    tensors = [(f"W{i}", w) for i, w in enumerate(model.weights)]
    tensors += [(f"b{i}", b) for i, b in enumerate(model.biases)]
    if model.mask is not None:
        tensors += [(f"mask{i}", m) for i, m in enumerate(model.mask)]
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "dcwp-checkpoint-v1",
        "config": {**asdict(model.config), "hidden_dims": list(model.config.hidden_dims)},
        "step": int(step),
        "seed": seed,
        "extra": extra or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[MaskedMLP, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"]))
        start = base + e["offset"]
        if start + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated at tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(e["shape"]).copy()
    cfg = header["config"]
    config = MLPConfig(cfg["input_dim"], cfg["num_classes"], tuple(cfg["hidden_dims"]), cfg["activation"])
    layers = len(config.layer_shapes)
    mask = [arrays[f"mask{i}"] for i in range(layers)] if "mask0" in arrays else None
    model = MaskedMLP(config, [arrays[f"W{i}"] for i in range(layers)],
                      [arrays[f"b{i}"] for i in range(layers)], mask)
    return model, header
