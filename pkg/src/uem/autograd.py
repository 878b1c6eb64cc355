"""Dense float64 tensors with reverse-mode autodiff on a dynamic tape.

Everything in the pipeline is 64-bit: the scale is small and finite-difference
gradient checks need the precision. Operations executed while a ``Tape`` is
active append a backward closure to it; ``Tape.backward`` replays the closures
in exact reverse execution order, accumulating (never overwriting) gradients.
With no active tape the same operations are pure value computations, which is
the evaluation path.

A tape and the tensors recorded on it belong to one thread; independent tapes
may run in parallel, and tensors that only ever get read (frozen parameters)
may be shared freely.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    NumericDomainError,
    NumericError,
    ShapeError,
)

NORM_FLOOR = 1e-12  # below this a vector counts as degenerate, not as zero-similar


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    The gradient buffer exists exactly when ``requires_grad`` is set and is
    always accumulated into with ``+=`` so that a tensor used several times
    in a graph receives the sum of all path contributions.
    """

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None

    @classmethod
    def _make(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = np.zeros_like(arr) if requires_grad else None
        return out

    # --- bookkeeping ---
    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    # --- operator sugar ---
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # --- method forms of the unary / reduction ops ---
    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def max(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_max(self, axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    def rows(self, start: int, stop: int) -> "Tensor":
        return slice_rows(self, start, stop)

    def cols(self, start: int, stop: int) -> "Tensor":
        return slice_cols(self, start, stop)


# --- dynamic tape -------------------------------------------------------------

_ACTIVE = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward computation, then call
    ``backward(loss)`` once. Replaying visits operations in exact reverse
    execution order; parameter gradients are sums of all contributions.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        self._outer = _active_tape()
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.tape = self._outer

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise NumericError("tape already replayed; build a fresh tape per backward pass")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.grad is None:
            raise NumericError("loss is not connected to this tape (requires_grad is not set)")
        self._consumed = True
        loss.grad += 1.0
        for out, backward in reversed(self._records):
            g = out.grad
            if g is None or not g.any():
                continue
            backward(g)


# --- helpers ------------------------------------------------------------------

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, value: np.ndarray,
            da: Callable[[np.ndarray], np.ndarray],
            db: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _active_tape()
    req = tape is not None and (a.requires_grad or b.requires_grad)
    out = Tensor._make(value, req)
    if req:
        def backward(g: np.ndarray) -> None:
            if a.grad is not None:
                a.grad += _unbroadcast(da(g), a.grad.shape)
            if b.grad is not None:
                b.grad += _unbroadcast(db(g), b.grad.shape)
        tape.record(out, backward)
    return out


def _unary(a: Tensor, value: np.ndarray,
           da: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _active_tape()
    req = tape is not None and a.requires_grad
    out = Tensor._make(value, req)
    if req:
        def backward(g: np.ndarray) -> None:
            a.grad += da(g)
        tape.record(out, backward)
    return out


# --- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    return _binary(a, b, value, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    return _binary(a, b, value, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    return _binary(a, b, value, lambda g: g * b.data, lambda g: g * a.data)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _unary(a, a.data * s, lambda g: g * s)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    if not np.all(np.isfinite(value)):
        raise NumericDomainError("exp overflowed to a non-finite value")
    return _unary(a, value, lambda g: g * value)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericDomainError("log of a nonpositive value")
    value = np.log(a.data)
    return _unary(a, value, lambda g: g / a.data)


# --- matrix and shape ops -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape} are incompatible")
    value = a.data @ b.data
    return _binary(a, b, value, lambda g: g @ b.data.T, lambda g: a.data.T @ g)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.data.shape}")
    return _unary(a, a.data.T, lambda g: g.T)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(orig))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"row slice needs a 2-D tensor, got shape {a.data.shape}")
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for shape {a.data.shape}")
    value = a.data[start:stop]
    tape = _active_tape()
    req = tape is not None and a.requires_grad
    out = Tensor._make(value, req)
    if req:
        def backward(g: np.ndarray) -> None:
            a.grad[start:stop] += g
        tape.record(out, backward)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"column slice needs a 2-D tensor, got shape {a.data.shape}")
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for shape {a.data.shape}")
    value = a.data[:, start:stop]
    tape = _active_tape()
    req = tape is not None and a.requires_grad
    out = Tensor._make(value, req)
    if req:
        def backward(g: np.ndarray) -> None:
            a.grad[:, start:stop] += g
        tape.record(out, backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    tape = _active_tape()
    req = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor._make(value, req)
    if req:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.grad is not None:
                    t.grad += np.take(g, range(lo, hi), axis=axis)
        tape.record(out, backward)
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    value = np.stack([t.data for t in tensors])
    tape = _active_tape()
    req = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor._make(value, req)
    if req:
        def backward(g: np.ndarray) -> None:
            for i, t in enumerate(tensors):
                if t.grad is not None:
                    t.grad += g[i]
        tape.record(out, backward)
    return out


# --- reductions -----------------------------------------------------------------

def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    value = a.data.mean(axis=axis)
    if axis is None:
        n = a.data.size
        return _unary(a, value, lambda g: np.full(a.data.shape, float(g) / n))
    n = a.data.shape[axis]
    return _unary(a, value, lambda g: np.repeat(np.expand_dims(g / n, axis), n, axis=axis))


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    value = a.data.sum(axis=axis)
    if axis is None:
        return _unary(a, value, lambda g: np.full(a.data.shape, float(g)))
    n = a.data.shape[axis]
    return _unary(a, value, lambda g: np.repeat(np.expand_dims(g, axis), n, axis=axis))


def tensor_max(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Max reduction; the subgradient routes to the first maximal entry."""
    if axis is None:
        value = a.data.max()
        idx = np.unravel_index(int(np.argmax(a.data)), a.data.shape)

        def da(g: np.ndarray) -> np.ndarray:
            out = np.zeros(a.data.shape)
            out[idx] = float(g)
            return out
        return _unary(a, np.asarray(value), da)
    value = a.data.max(axis=axis)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def da(g: np.ndarray) -> np.ndarray:
        out = np.zeros(a.data.shape)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis)
        return out
    return _unary(a, value, da)


# --- fused pipeline ops -----------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last dimension."""
    if x.data.ndim == 0 or x.data.shape[-1] < 1:
        raise ShapeError(f"softmax needs a nonempty last dimension, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def dx(g: np.ndarray) -> np.ndarray:
        return y * (g - (g * y).sum(axis=-1, keepdims=True))
    return _unary(x, y, dx)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-slice normalization over the last dimension, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match last dim {d}"
        )
    if eps <= 0.0:
        raise NumericDomainError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = gamma.data * xhat + beta.data

    tape = _active_tape()
    req = tape is not None and (x.requires_grad or gamma.requires_grad or beta.requires_grad)
    out = Tensor._make(value, req)
    if req:
        lead = tuple(range(x.data.ndim - 1))

        def backward(g: np.ndarray) -> None:
            if gamma.grad is not None:
                gamma.grad += (g * xhat).sum(axis=lead)
            if beta.grad is not None:
                beta.grad += g.sum(axis=lead)
            if x.grad is not None:
                gh = g * gamma.data
                x.grad += inv * (
                    gh
                    - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
                )
        tape.record(out, backward)
    return out


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped into [-1, 1].

    Near-zero-norm inputs raise: a zero feature vector means corrupt
    ingestion, not zero similarity.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine needs equal-length vectors, got {a.data.shape} and {b.data.shape}")
    na = math.sqrt(float(np.dot(a.data, a.data)))
    nb = math.sqrt(float(np.dot(b.data, b.data)))
    if na <= NORM_FLOOR:
        raise DegenerateVectorError(f"first cosine argument has norm {na:.3e}")
    if nb <= NORM_FLOOR:
        raise DegenerateVectorError(f"second cosine argument has norm {nb:.3e}")
    raw = float(np.dot(a.data, b.data)) / (na * nb)
    value = min(1.0, max(-1.0, raw))

    def da(g: np.ndarray) -> np.ndarray:
        return float(g) * (b.data / (na * nb) - raw * a.data / (na * na))

    def db(g: np.ndarray) -> np.ndarray:
        return float(g) * (a.data / (na * nb) - raw * b.data / (nb * nb))
    return _binary(a, b, np.asarray(value), da, db)


# --- gradient checking -------------------------------------------------------------

@dataclass
class GradCheckFailure:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    checked: int
    failures: list[GradCheckFailure] = field(default_factory=list)
    max_rel_err: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must be a deterministic scalar function of the tensors in
    ``params`` (re-evaluated many times, so any sampling inside must be
    frozen by the caller). The relative error per checked entry is
    ``|analytic - fd| / max(1, |fd|)``. ``max_entries_per_param`` optionally
    caps the number of entries probed per tensor (seeded subsample); by
    default every entry is probed.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        y = f()
    if y.data.shape != ():
        raise ShapeError(f"grad_check needs a scalar objective, got shape {y.data.shape}")
    if not np.isfinite(y.data):
        raise NumericError("objective evaluated to a non-finite value")
    tape.backward(y)
    analytic = {name: (p.grad.copy() if p.grad is not None else None) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(checked=0)
    for name, p in params.items():
        if analytic[name] is None:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        for k in entries:
            orig = flat[k]
            flat[k] = orig + h
            y_plus = float(f().data)
            flat[k] = orig - h
            y_minus = float(f().data)
            flat[k] = orig
            if not (math.isfinite(y_plus) and math.isfinite(y_minus)):
                raise NumericError(f"objective non-finite while perturbing {name}[{k}]")
            fd = (y_plus - y_minus) / (2.0 * h)
            an = float(analytic[name].reshape(-1)[k])
            rel = abs(an - fd) / max(1.0, abs(fd))
            report.checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tol:
                idx = np.unravel_index(int(k), p.data.shape)
                report.failures.append(GradCheckFailure(name, idx, an, fd, rel))
    return report
