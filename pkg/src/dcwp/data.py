"""Biased datasets: binary spurious-feature environments, a multiclass
synthetic benchmark and Colored-MNIST built from raw IDX files."""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# ------------------------------------------------------------------ datasets


@dataclass
class BiasedDataset:
    """Samples with target label, bias label and an aligned/conflicting flag.

    ``aligned[i]`` is True iff ``bias[i]`` equals the spurious attribute that
    class ``y[i]`` is associated with.
    """

    x: np.ndarray
    y: np.ndarray
    bias: np.ndarray
    aligned: np.ndarray
    num_classes: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.bias = np.asarray(self.bias, dtype=np.int64)
        self.aligned = np.asarray(self.aligned, dtype=bool)
        n = len(self.x)
        if not (len(self.y) == len(self.bias) == len(self.aligned) == n):
            raise ValueError("dataset arrays differ in length")

    def __len__(self):
        return len(self.x)

    @property
    def conflicting(self) -> np.ndarray:
        return ~self.aligned

    def group_counts(self) -> tuple[int, int]:
        """(bias-aligned, bias-conflicting) sample counts."""
        a = int(self.aligned.sum())
        return a, len(self) - a

    def subset(self, idx) -> BiasedDataset:
        idx = np.asarray(idx)
        return BiasedDataset(self.x[idx], self.y[idx], self.bias[idx], self.aligned[idx],
                             self.num_classes, self.name, dict(self.meta))


# ------------------------------------------------------- binary environments


@dataclass
class BinaryEnvSpec:
    """Binary environment with one invariant and ``D`` spurious {-1,1} features.

    ``p`` is the probability that a spurious feature equals the label; ``phi``
    mixes in the debiasing distribution that forces it to ``-y``.  The test
    environment is ``p=0.5, phi=0``.
    """

    p: float
    D: int
    phi: float = 0.0

    def __post_init__(self):
        if not 0.5 <= self.p <= 1:
            raise ValueError(f"p must lie in [0.5, 1], got {self.p}")
        if self.D < 1:
            raise ValueError(f"D must be >= 1, got {self.D}")
        if not 0 <= self.phi <= 1:
            raise ValueError(f"mixture weight phi must lie in [0, 1], got {self.phi}")

    @property
    def agree_probability(self) -> float:
        """P(Z_sp,i = y | y) under the mixture."""
        return (1 - self.phi) * self.p


def debias_weight(p: float) -> float:
    """Mixture weight that makes every spurious feature independent of y."""
    if not 0.5 < p <= 1:
        raise ValueError(f"p must lie in (0.5, 1], got {p}")
    return 1 - 1 / (2 * p)


def check_bias_condition(spec: BinaryEnvSpec) -> bool:
    """True iff the mixture still favours Z_sp = y, i.e. phi <= 1 - 1/(2p)."""
    agree = spec.agree_probability
    return 1 - agree <= agree


def sample_binary_env(spec: BinaryEnvSpec, n: int, rng: np.random.Generator) -> BiasedDataset:
    """Columns of ``x`` are ``(Z_inv, Z_sp,1..D)``; labels are in {-1, 1}.

    The bias label is the sign of the spurious majority (0 on ties); a sample
    counts as aligned iff that sign equals y.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    y = rng.choice(np.array([-1, 1]), size=n)
    forced = rng.random((n, spec.D)) < spec.phi
    agree = rng.random((n, spec.D)) < spec.p
    sign = np.where(forced, -1, np.where(agree, 1, -1))
    z_sp = sign * y[:, None]
    x = np.column_stack([y, z_sp]).astype(np.float64)
    bias = np.sign(z_sp.sum(axis=1)).astype(np.int64)
    return BiasedDataset(x, y, bias, bias == y, num_classes=2, name="binary-env",
                         meta={"spec": asdict(spec)})


# -------------------------------------------------- multiclass synthetic data


@dataclass
class SyntheticSpec:
    """Multiclass analogue of the binary environment.

    Each class has a {-1,1} invariant code of length ``inv_dim``, observed
    through Gaussian noise of scale ``inv_noise``.  Each bias attribute has a
    {-1,1} spurious code of length ``spurious_dim`` whose entries flip with
    probability ``sp_flip``.  A fraction ``ratio`` of training samples carry a
    bias attribute other than their class.  Codes come from ``code_seed`` so
    train and test splits share them.
    """

    num_classes: int = 4
    spurious_dim: int = 64
    ratio: float = 0.01
    inv_dim: int = 16
    inv_noise: float = 1.5
    sp_flip: float = 0.1
    code_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.spurious_dim < 1 or self.inv_dim < 1:
            raise ValueError("synthetic spec needs >= 2 classes and positive dims")
        if not 0 <= self.ratio < 1:
            raise ValueError(f"bias ratio must lie in [0, 1), got {self.ratio}")

    @property
    def input_dim(self) -> int:
        return self.inv_dim + self.spurious_dim

    def codes(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.code_seed)
        inv = rng.choice(np.array([-1.0, 1.0]), size=(self.num_classes, self.inv_dim))
        sp = rng.choice(np.array([-1.0, 1.0]), size=(self.num_classes, self.spurious_dim))
        return inv, sp


def generate_synthetic(spec: SyntheticSpec, n: int, rng: np.random.Generator,
                       balanced: bool = False) -> BiasedDataset:
    """Training split (exactly ``conflict_count`` conflicting rows) or, with
    ``balanced``, a test split whose bias attribute is uniform per class."""
    inv_codes, sp_codes = spec.codes()
    C = spec.num_classes
    y = rng.integers(0, C, size=n)
    if balanced:
        bias = rng.integers(0, C, size=n)
    else:
        bias = y.copy()
        k = conflict_count(n, spec.ratio)
        idx = rng.choice(n, size=k, replace=False)
        bias[idx] = (y[idx] + rng.integers(1, C, size=k)) % C
    inv = inv_codes[y] + spec.inv_noise * rng.standard_normal((n, spec.inv_dim))
    flips = np.where(rng.random((n, spec.spurious_dim)) < spec.sp_flip, -1.0, 1.0)
    sp = sp_codes[bias] * flips
    x = np.hstack([inv, sp])
    return BiasedDataset(x, y, bias, bias == y, num_classes=C, name="synthetic",
                         meta={"spec": asdict(spec), "balanced": balanced})


# ------------------------------------------------------------------ IDX files


class IDXFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path: str | Path, normalize: bool = True) -> np.ndarray:
    """Parse a big-endian unsigned-byte IDX file (optionally gzip-compressed).

    Image files (magic 0x803) become an ``(n, rows, cols)`` float array in
    [0, 1] when ``normalize``; label files (magic 0x801) an int vector.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXFormatError("file shorter than the 4-byte magic", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise IDXFormatError(f"bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IDXFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    if len(raw) - header_end < expected:
        raise IDXFormatError(f"truncated payload: need {expected} bytes, have {len(raw) - header_end}",
                             len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)
    if magic == IDX_LABELS:
        return data.astype(np.int64)
    return data / 255.0 if normalize else data.copy()


def write_idx(path: str | Path, array: np.ndarray, compress: bool | None = None) -> Path:
    """Write a uint8 array of 1 or 3 dims as IDX; ``.gz`` paths are gzipped."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("IDX writer expects uint8 data")
    if arr.ndim not in (1, 3):
        raise ValueError("only label (1-d) and image (3-d) IDX files are supported")
    magic = IDX_LABELS if arr.ndim == 1 else IDX_IMAGES
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    if compress or (compress is None and path.suffix == ".gz"):
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
    return path


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing MNIST file {directory / stem}[.gz]")


def load_mnist(directory: str | Path, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    img_stem, lbl_stem = MNIST_FILES[split]
    images = load_idx(_find(directory, img_stem))
    labels = load_idx(_find(directory, lbl_stem))
    if len(images) != len(labels):
        raise ValueError(f"{split}: {len(images)} images but {len(labels)} labels")
    return images, labels


# -------------------------------------------------------------- Colored MNIST

# Pure, secondary and a few intermediate hues; index = class it is assigned to.
PALETTE = np.array([
    [1.0, 0.0, 0.0],   # red
    [0.0, 1.0, 0.0],   # green
    [0.0, 0.0, 1.0],   # blue
    [1.0, 1.0, 0.0],   # yellow
    [1.0, 0.0, 1.0],   # magenta
    [0.0, 1.0, 1.0],   # cyan
    [1.0, 0.5, 0.0],   # orange
    [0.5, 0.0, 1.0],   # violet
    [0.0, 1.0, 0.5],   # spring green
    [1.0, 1.0, 1.0],   # white
])

# Published (aligned, conflicting) counts of the standard 55,000-image split.
REFERENCE_CMNIST_COUNTS = {
    0.005: (54_751, 249),
    0.01: (54_509, 491),
    0.02: (54_014, 986),
    0.05: (52_551, 2_449),
}
REFERENCE_TRAIN_SIZE = 55_000


def conflict_count(n: int, ratio: float) -> int:
    """Number of bias-conflicting samples for a split of size ``n``.

    The standard 55,000-sample split uses the published counts; anything else
    rounds ``ratio * n``.
    """
    if n == REFERENCE_TRAIN_SIZE:
        for r, (_, k) in REFERENCE_CMNIST_COUNTS.items():
            if abs(ratio - r) < 1e-12:
                return k
    return int(round(ratio * n))


@dataclass
class ColoredMnistSpec:
    ratio: float = 0.01
    mode: str = "train"
    palette: np.ndarray = field(default_factory=lambda: PALETTE.copy())

    def __post_init__(self):
        self.palette = np.asarray(self.palette, dtype=np.float64)
        if self.palette.shape != (10, 3):
            raise ValueError("palette must hold exactly 10 RGB colours")
        if self.mode not in ("train", "test"):
            raise ValueError(f"mode must be 'train' or 'test', got {self.mode!r}")
        if self.mode == "train" and not 0 < self.ratio < 1:
            raise ValueError(f"bias ratio must lie in (0, 1), got {self.ratio}")


def generate_colored_mnist(images: np.ndarray, labels: np.ndarray, spec: ColoredMnistSpec,
                           rng: np.random.Generator) -> BiasedDataset:
    """Tint grayscale digits; inputs are flattened ``3 x 28 x 28`` arrays.

    Train mode colours exactly ``conflict_count`` random samples with a
    uniformly drawn non-assigned colour and the rest with their class colour.
    Test mode draws every colour uniformly from all ten.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if spec.mode == "test":
        colour = rng.integers(0, 10, size=n)
    else:
        colour = labels.copy()
        k = conflict_count(n, spec.ratio)
        idx = rng.choice(n, size=k, replace=False)
        colour[idx] = (labels[idx] + rng.integers(1, 10, size=k)) % 10
    rgb = spec.palette[colour]                                   # (n, 3)
    x = rgb[:, :, None, None] * images[:, None, :, :]            # (n, 3, H, W)
    return BiasedDataset(x.reshape(n, -1), labels, colour, colour == labels, num_classes=10,
                         name="colored-mnist",
                         meta={"ratio": spec.ratio, "mode": spec.mode,
                               "input_shape": [3, *images.shape[1:]]})


# ---------------------------------------------------------- binary container

DATASET_MAGIC = b"DCWPDATA"


def save_dataset(ds: BiasedDataset, path: str | Path) -> Path:
    """Binary layout::

        8 bytes   magic b"DCWPDATA"
        u32 LE    header length H
        H bytes   UTF-8 JSON header (n, dim, num_classes, name, meta)
        n*dim*8   inputs, little-endian float64, row-major
        n bytes   target labels, int8
        n bytes   bias labels, int8
        n bytes   group flags, uint8 (1 = bias-aligned)
    """
    n, dim = ds.x.shape
    header = {"format": "dcwp-dataset-v1", "n": n, "dim": dim, "num_classes": ds.num_classes,
              "name": ds.name, "meta": ds.meta}
    blob = json.dumps(header, sort_keys=True, default=_json_default).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        f.write(ds.y.astype(np.int8).tobytes())
        f.write(ds.bias.astype(np.int8).tobytes())
        f.write(ds.aligned.astype(np.uint8).tobytes())
    return path


def load_dataset(path: str | Path) -> BiasedDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    h = json.loads(raw[12:12 + hlen])
    n, dim = h["n"], h["dim"]
    off = 12 + hlen
    need = off + n * dim * 8 + 3 * n
    if len(raw) < need:
        raise ValueError(f"{path}: truncated container ({len(raw)} < {need} bytes)")
    x = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).copy()
    off += n * dim * 8
    y = np.frombuffer(raw, dtype=np.int8, count=n, offset=off).astype(np.int64)
    bias = np.frombuffer(raw, dtype=np.int8, count=n, offset=off + n).astype(np.int64)
    aligned = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 2 * n).astype(bool)
    return BiasedDataset(x, y, bias, aligned, h["num_classes"], h["name"], h["meta"])


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
