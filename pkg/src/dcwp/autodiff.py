"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that live on it.
Leaves are created with :meth:`Tape.leaf`; anything built from plain arrays is
a constant and never receives a gradient.  :func:`backward` walks the tape in
reverse once and returns the gradient of a scalar output for every leaf.

    tape = Tape()
    w = tape.leaf(np.ones(3))
    loss = mean(mul(w, w))
    grads = backward(tape, loss)     # {w: array([2/3, 2/3, 2/3])}
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class AutodiffError(ValueError):
    """Base class for contract violations inside the tensor layer."""


class ShapeError(AutodiffError):
    pass


class ZeroNormError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


def _readonly(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    view = arr.view()
    view.flags.writeable = False
    return view


class Tensor:
    """Immutable float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, index: int = -1):
        self.data = _readonly(data)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self):
        kind = "const" if self.tape is None else f"node={self.index}"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of primitive applications.

    Each entry holds the indices of its operands and a closure mapping the
    output cotangent to one cotangent per operand.  Operands always precede
    their consumers, so one reverse sweep suffices.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._leaves: list[Tensor] = []

    def __len__(self):
        return len(self._parents)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, len(self._parents))
        self._parents.append(())
        self._vjps.append(None)
        self._leaves.append(t)
        return t

    def _record(self, value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        t = Tensor(value, self, len(self._parents))
        self._parents.append(tuple(p.index if p.tape is self else -1 for p in parents))
        self._vjps.append(vjp)
        return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise AutodiffError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _emit(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape._record(value, parents, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    # skip the cotangent of an operand that is not on a tape (inputs, frozen weights)
    need_a, need_b = a.tape is not None, b.tape is not None
    return _emit(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected two equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(np.dot(ad, bd), (a, b), lambda g: (g * bd, g * ad))


# ----------------------------------------------------------------- unary ops


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(c * x.data, (x,), lambda g: (c * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient 0 at exactly 0
    live = x.data > 0
    return _emit(x.data * live, (x,), lambda g: (g * live,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        raise DomainError("exp overflowed")
    return _emit(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive entry")
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * sign,))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _emit(x.data.T, (x,), lambda g: (g.T,))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _emit(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _emit(x.data.sum(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum(x, axis), 1.0 / count)


def l2_normalize(x) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms == 0):
        rows = np.flatnonzero(norms.reshape(-1) == 0)
        raise ZeroNormError(f"l2_normalize: zero-norm rows at {rows[:10].tolist()}")
    u = x.data / norms

    def vjp(g):
        return ((g - u * np.sum(g * u, axis=-1, keepdims=True)) / norms,)

    return _emit(u, (x,), vjp)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over the last axis (rows of -inf allowed only
    alongside a finite entry)."""
    m = np.max(z, axis=-1, keepdims=True)
    return m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def log_softmax(x, mask=None) -> Tensor:
    """Log-softmax over the last axis.

    With a boolean ``mask`` the normalisation runs over the True entries only;
    masked-out outputs are 0 and receive no gradient.  Every row needs at
    least one True entry.
    """
    x = as_tensor(x)
    if mask is None:
        out = x.data - _logsumexp(x.data)
        p = np.exp(out)
        return _emit(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"log_softmax: mask shape {mask.shape} != input {x.shape}")
    if not np.all(mask.any(axis=-1)):
        raise ShapeError("log_softmax: a row has no unmasked entries")
    z = np.where(mask, x.data, -np.inf)
    lse = _logsumexp(z)
    out = np.where(mask, x.data - lse, 0.0)
    p = np.where(mask, np.exp(out), 0.0)

    def vjp(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), vjp)


def take_rows(x, idx) -> Tensor:
    """Row gather ``x[idx]``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-d index array")
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    unique = np.unique(idx).size == idx.size

    def vjp(g):
        out = np.zeros(shape)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit(x.data[idx], (x,), vjp)


def pick(x, cols) -> Tensor:
    """Per-row element gather ``x[i, cols[i]]`` of a matrix."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.intp)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: need a matrix and one column per row, got {x.shape}, {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise ShapeError(f"pick: column index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _emit(x.data[rows, cols], (x,), vjp)


def straight_through(hard, relaxed) -> Tensor:
    """Forward value of ``hard``; gradient passed unchanged to ``relaxed``."""
    relaxed = as_tensor(relaxed)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != relaxed.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {relaxed.shape}")
    return _emit(hard, (relaxed,), lambda g: (g,))


# ------------------------------------------------------------------ backward


def backward(tape: Tape, output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``output`` with respect to every leaf on ``tape``.

    Leaves the output does not depend on get an all-zero gradient.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is not tape:
        raise AutodiffError("output was not recorded on this tape")

    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[output.index] = np.ones(output.shape)
    for i in range(output.index, -1, -1):
        g = grads[i]
        vjp = tape._vjps[i]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape._parents[i], vjp(g)):
            if parent < 0:
                continue
            if grads[parent] is None:
                grads[parent] = np.array(pg, dtype=np.float64)
            else:
                grads[parent] = grads[parent] + pg

    out = {}
    for leaf in tape._leaves:
        g = grads[leaf.index]
        out[leaf] = np.zeros(leaf.shape) if g is None else np.reshape(g, leaf.shape)
    return out


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def value_and_grad(fn: Callable[..., Tensor], *arrays) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return value and gradients."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    grads = backward(tape, out)
    return out.item(), [grads[leaf] for leaf in leaves]
