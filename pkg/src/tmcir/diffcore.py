"""Dense 2-D array computation with reverse-mode gradient accumulation.

Every differentiable operation used by the encoders, the token-fusion module
and the losses is defined here, on top of 64-bit numpy arrays.  A ``Tape``
records operations in creation order (which is topological by construction);
``Tape.backward`` walks the record once in reverse, accumulating gradients
into every tracked leaf.  Reductions follow numpy's canonical ascending-index
order, so runs are bit-reproducible.

A finite-difference harness (``fd_check``) verifies analytic gradients of any
scalar-valued function of named parameter arrays against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    EmptySequenceError,
    EvaluationError,
    ShapeError,
)

NORM_FLOOR = 1e-12


def as_matrix(data) -> np.ndarray:
    """Coerce input to a 2-D float64 array (scalars become 1x1)."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")
    return out


class Var:
    """A node in the computation graph: a 2-D float64 value plus grad slot."""

    __slots__ = ("data", "grad", "tape", "trainable", "name", "_parents", "_vjp")

    def __init__(self, data, tape: "Tape | None", *, trainable: bool = False,
                 name: str | None = None,
                 parents: tuple["Var", ...] = (),
                 vjp: Callable[[np.ndarray], None] | None = None):
        self.data = as_matrix(data)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.trainable = trainable
        self.name = name
        self._parents = parents
        self._vjp = vjp
        if tape is not None:
            tape._nodes.append(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 value, got {self.data.shape}")
        return float(self.data[0, 0])

    # -- elementwise arithmetic (numpy broadcasting; grads are unbroadcast) --

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(other, self.tape)

    def __add__(self, other) -> "Var":
        b = self._lift(other)
        out_data = self.data + b.data

        def vjp(g, a=self, b=b):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Var(out_data, self.tape, parents=(self, b), vjp=vjp)

    def __radd__(self, other) -> "Var":
        return self.__add__(other)

    def __sub__(self, other) -> "Var":
        b = self._lift(other)
        out_data = self.data - b.data

        def vjp(g, a=self, b=b):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Var(out_data, self.tape, parents=(self, b), vjp=vjp)

    def __mul__(self, other) -> "Var":
        b = self._lift(other)
        out_data = self.data * b.data

        def vjp(g, a=self, b=b):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Var(out_data, self.tape, parents=(self, b), vjp=vjp)

    def __rmul__(self, other) -> "Var":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Var":
        b = self._lift(other)
        out_data = self.data / b.data

        def vjp(g, a=self, b=b):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Var(out_data, self.tape, parents=(self, b), vjp=vjp)

    def __neg__(self) -> "Var":
        return self * -1.0

    def __matmul__(self, other) -> "Var":
        return matmul(self, other)


class Tape:
    """Ordered operation record; one tape per training step."""

    def __init__(self):
        self._nodes: list[Var] = []

    def var(self, data, *, trainable: bool = False, name: str | None = None) -> Var:
        return Var(data, self, trainable=trainable, name=name)

    def constant(self, data) -> Var:
        return Var(data, self)

    def backward(self, loss: Var) -> None:
        """Accumulate gradients of a scalar loss into every tracked node."""
        if loss.data.shape != (1, 1):
            raise ShapeError(f"loss must be scalar (1x1), got {loss.data.shape}")
        loss._accumulate(np.ones((1, 1)))
        for node in reversed(self._nodes):
            if node.grad is None or node._vjp is None:
                continue
            node._vjp(node.grad)


# -- structural and reduction operations --


def matmul(a: Var, b) -> Var:
    b = a._lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def vjp(g, a=a, b=b):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Var(out_data, a.tape, parents=(a, b), vjp=vjp)


def transpose(a: Var) -> Var:
    def vjp(g, a=a):
        a._accumulate(g.T)

    return Var(a.data.T, a.tape, parents=(a,), vjp=vjp)


def gather_rows(a: Var, indices: Sequence[int]) -> Var:
    """Select rows by index (duplicates allowed; grads scatter-add)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError(
            f"gather_rows index out of range for {a.shape[0]} rows: "
            f"[{idx.min()}, {idx.max()}]")
    out_data = a.data[idx]

    def vjp(g, a=a, idx=idx):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


def concat_rows(parts: Sequence[Var]) -> Var:
    if not parts:
        raise EmptySequenceError("concat_rows of zero parts")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {p.shape[1]} vs {cols}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g, parts=tuple(parts), offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(g[lo:hi])

    return Var(out_data, parts[0].tape, parents=tuple(parts), vjp=vjp)


def reshape(a: Var, rows: int, cols: int) -> Var:
    if rows * cols != a.shape[0] * a.shape[1]:
        raise ShapeError(f"cannot reshape {a.shape} to ({rows}, {cols})")
    out_data = a.data.reshape(rows, cols)

    def vjp(g, a=a):
        a._accumulate(g.reshape(a.shape))

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


def row_sum(a: Var) -> Var:
    """Sum each row to a single column: (n, d) -> (n, 1)."""
    out_data = a.data.sum(axis=1, keepdims=True)

    def vjp(g, a=a):
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


def total_sum(a: Var) -> Var:
    out_data = np.array([[a.data.sum()]])

    def vjp(g, a=a):
        a._accumulate(np.full(a.shape, g[0, 0]))

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


def exp(a: Var) -> Var:
    out_data = np.exp(a.data)

    def vjp(g, a=a, out_data=out_data):
        a._accumulate(g * out_data)

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


def log(a: Var) -> Var:
    out_data = np.log(a.data)

    def vjp(g, a=a):
        a._accumulate(g / a.data)

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


def sqrt(a: Var) -> Var:
    out_data = np.sqrt(a.data)

    def vjp(g, a=a, out_data=out_data):
        a._accumulate(g / (2.0 * out_data))

    return Var(out_data, a.tape, parents=(a,), vjp=vjp)


# -- composite operations used throughout the model --


def mean_rows(a: Var) -> Var:
    """Arithmetic mean of rows, (n, d) -> (1, d), in ascending row order."""
    n = a.shape[0]
    if n == 0:
        raise EmptySequenceError("mean_rows of an empty array")
    weights = Var(np.full((1, n), 1.0 / n), a.tape)
    return matmul(weights, a)


def l2_normalize_rows(a: Var) -> Var:
    """Scale each row to unit Euclidean norm; near-zero rows are an error."""
    norms = np.linalg.norm(a.data, axis=1)
    bad = np.flatnonzero(norms <= NORM_FLOOR)
    if bad.size:
        raise DegenerateInputError(
            f"row {int(bad[0])} has near-zero norm {norms[bad[0]]:.3e}")
    return a / sqrt(row_sum(a * a))


def cosine(u: Var, v: Var) -> Var:
    """Cosine similarity of two single-row vectors, as a 1x1 node."""
    if u.shape[0] != 1 or v.shape[0] != 1:
        raise ShapeError(f"cosine expects single rows, got {u.shape} and {v.shape}")
    if u.shape[1] != v.shape[1]:
        raise ShapeError(f"cosine dimension mismatch: {u.shape} vs {v.shape}")
    for label, x in (("first", u), ("second", v)):
        if np.linalg.norm(x.data) <= NORM_FLOOR:
            raise DegenerateInputError(f"{label} argument of cosine has near-zero norm")
    dot = row_sum(u * v)
    return dot / (sqrt(row_sum(u * u)) * sqrt(row_sum(v * v)))


# -- finite-difference verification --


@dataclass
class FdReport:
    """Result of comparing analytic gradients against central differences."""

    passed: bool
    tol: float
    h: float
    max_rel_err: float
    worst: tuple[str, tuple[int, int]] | None
    per_param: dict[str, float] = field(default_factory=dict)


def fd_check(f: Callable[[Tape, dict[str, Var]], Var],
             params: Mapping[str, np.ndarray],
             h: float = 1e-3,
             tol: float = 1e-4) -> FdReport:
    """Verify the analytic gradient of ``f`` at ``params``.

    ``f`` receives a fresh tape plus tracked variables (one per named array)
    and must return a scalar node.  The numeric side re-evaluates ``f`` at
    p +/- h per coordinate on throwaway tapes, so it is independent of the
    gradient rules it checks.  Relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-5, 1e-2]")
    base = {k: np.array(as_matrix(v), copy=True) for k, v in params.items()}

    tape = Tape()
    tracked = {k: tape.var(v.copy(), trainable=True, name=k) for k, v in base.items()}
    loss = f(tape, tracked)
    if loss.data.shape != (1, 1):
        raise ShapeError(f"fd_check target must be scalar, got {loss.shape}")
    tape.backward(loss)
    analytic = {
        k: (tracked[k].grad if tracked[k].grad is not None else np.zeros_like(base[k]))
        for k in base
    }

    def evaluate(arrays: dict[str, np.ndarray], where: tuple[str, tuple[int, int]]) -> float:
        t = Tape()
        vs = {k: t.var(a.copy(), name=k) for k, a in arrays.items()}
        value = f(t, vs).item()
        if not np.isfinite(value):
            raise EvaluationError(
                f"non-finite value {value} while perturbing {where[0]}{where[1]}")
        return value

    max_rel = 0.0
    worst: tuple[str, tuple[int, int]] | None = None
    per_param: dict[str, float] = {}
    for name, arr in base.items():
        param_max = 0.0
        for i in range(arr.shape[0]):
            for j in range(arr.shape[1]):
                orig = arr[i, j]
                arr[i, j] = orig + h
                up = evaluate(base, (name, (i, j)))
                arr[i, j] = orig - h
                down = evaluate(base, (name, (i, j)))
                arr[i, j] = orig
                numeric = (up - down) / (2.0 * h)
                a = analytic[name][i, j]
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if rel > param_max:
                    param_max = rel
                if rel > max_rel:
                    max_rel = rel
                    worst = (name, (i, j))
        per_param[name] = param_max
    return FdReport(passed=max_rel <= tol, tol=tol, h=h,
                    max_rel_err=max_rel, worst=worst, per_param=per_param)
