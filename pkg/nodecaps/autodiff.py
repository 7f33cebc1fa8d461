"""Tape-based reverse-mode differentiation over numpy arrays.

Operations in this module accept plain arrays or :class:`Variable` objects.
With plain arrays they just compute. As soon as one input is a Variable, the
result is a Variable too and the call is appended to the owning :class:`Tape`
as a primitive record. :func:`backward` replays the records in reverse and
pulls gradients through the adjoint registered for each primitive.

The model code is written once against these functions and serves both the
plain forward pass (evaluation, export) and the taped one (training,
gradient checks).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .errors import NodeCapsError, ShapeError, StaleTapeError
from .filters import weighted_sum
from .graph import SparseMatrix, spmm as _spmm

__all__ = [
    "ADJOINTS",
    "Variable",
    "Tape",
    "GradientSet",
    "backward",
    "value_of",
    "matmul",
    "add",
    "mul",
    "affine",
    "square",
    "relu",
    "softmax",
    "normalize",
    "squash",
    "length",
    "spmm",
    "weighted_spmm",
    "gather_rows",
    "reduce_sum",
]

log = logging.getLogger(__name__)

NORM_EPS = 1e-12

# op name -> adjoint(g, out, *input_values, **attrs) -> tuple of input grads
ADJOINTS: dict[str, Callable[..., tuple]] = {}


def defvjp(op: str):
    def register(fn):
        ADJOINTS[op] = fn
        return fn

    return register


class Watchable(Protocol):
    generation: int

    def arrays(self) -> dict[str, np.ndarray]: ...


class Variable:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: Tape, index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Variable{label} #{self.index} shape={self.shape}>"


@dataclass(frozen=True)
class Record:
    """One primitive call: which op, which tape slots went in and came out."""

    op: str
    inputs: tuple[int | None, ...]
    output: int
    input_values: tuple[Any, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered log of primitive calls; topological by construction."""

    def __init__(self):
        self.records: list[Record] = []
        self.values: list[np.ndarray] = []
        self.leaves: dict[str, int] = {}
        self._watched: Watchable | None = None
        self._generation: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def _push(self, value, name: str | None = None) -> Variable:
        self.values.append(value)
        return Variable(value, self, len(self.values) - 1, name)

    def variable(self, value, name: str) -> Variable:
        """Register a leaf whose gradient :func:`backward` should report."""
        if name in self.leaves:
            raise NodeCapsError(f"leaf {name!r} is already on the tape")
        var = self._push(np.asarray(value, dtype=np.float64), name)
        self.leaves[name] = var.index
        return var

    def watch(self, params: Watchable) -> dict[str, Variable]:
        """Register every array of ``params`` as a leaf and pin its generation."""
        self._watched = params
        self._generation = params.generation
        return {name: self.variable(arr, name) for name, arr in params.arrays().items()}

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


@dataclass(frozen=True)
class GradientSet:
    """Gradients keyed by leaf name; ``reached`` lists leaves the loss depends on."""

    grads: dict[str, np.ndarray]
    reached: frozenset[str]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def items(self):
        return self.grads.items()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads.values())


def value_of(x):
    return x.value if isinstance(x, Variable) else x


def _apply(op: str, forward: Callable, *inputs, **attrs):
    tape = None
    for x in inputs:
        if isinstance(x, Variable):
            if tape is not None and x.tape is not tape:
                raise NodeCapsError(f"{op}: inputs come from different tapes")
            tape = x.tape
    values = tuple(value_of(x) for x in inputs)
    out = forward(*values, **attrs)
    if tape is None:
        return out
    if op not in ADJOINTS:
        raise NodeCapsError(f"primitive {op!r} has no registered adjoint")
    var = tape._push(out)
    slots = tuple(x.index if isinstance(x, Variable) else None for x in inputs)
    tape.records.append(Record(op, slots, var.index, values, attrs))
    return var


def backward(tape: Tape, loss: Variable) -> GradientSet:
    """Replay ``tape`` in reverse from a scalar ``loss``."""
    if not isinstance(loss, Variable) or loss.tape is not tape:
        raise NodeCapsError("loss must be a Variable recorded on this tape")
    if np.size(loss.value) != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if tape._watched is not None and tape._watched.generation != tape._generation:
        raise StaleTapeError(
            f"parameters changed since the tape was recorded "
            f"(generation {tape._generation} -> {tape._watched.generation})"
        )

    grads: list[np.ndarray | None] = [None] * len(tape.values)
    grads[loss.index] = np.ones_like(np.asarray(loss.value, dtype=np.float64))
    for record in reversed(tape.records):
        g = grads[record.output]
        if g is None:
            continue
        adjoint = ADJOINTS[record.op]
        input_grads = adjoint(g, tape.values[record.output], *record.input_values, **record.attrs)
        for slot, gi in zip(record.inputs, input_grads):
            if slot is None or gi is None:
                continue
            grads[slot] = gi if grads[slot] is None else grads[slot] + gi

    out, reached = {}, set()
    for name, slot in tape.leaves.items():
        if grads[slot] is None:
            out[name] = np.zeros_like(tape.values[slot])
        else:
            out[name] = np.asarray(grads[slot], dtype=np.float64)
            reached.add(name)
    return GradientSet(out, frozenset(reached))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _parse_contraction(spec: str) -> tuple[str, str, str]:
    lhs, _, out = spec.replace(" ", "").partition("->")
    a, _, b = lhs.partition(",")
    if not (a and b and out is not None):
        raise ShapeError(f"contraction spec must look like 'ij,jk->ik', got {spec!r}")
    for name, idx, other in (("first", a, b), ("second", b, a)):
        if not set(idx) <= set(out) | set(other):
            raise ShapeError(f"{spec!r}: {name} operand has indices summed only locally")
    return a, b, out


def matmul(spec: str, a, b):
    """Two-operand tensor contraction written as an einsum spec."""
    _parse_contraction(spec)
    return _apply("matmul", lambda x, y, spec: np.einsum(spec, x, y, optimize=True), a, b, spec=spec)


@defvjp("matmul")
def _matmul_vjp(g, out, a, b, spec):
    ia, ib, io = _parse_contraction(spec)
    ga = np.einsum(f"{io},{ib}->{ia}", g, b, optimize=True)
    gb = np.einsum(f"{io},{ia}->{ib}", g, a, optimize=True)
    return ga, gb


def add(a, b):
    return _apply("add", np.add, a, b)


@defvjp("add")
def _add_vjp(g, out, a, b):
    return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


def mul(a, b):
    return _apply("mul", np.multiply, a, b)


@defvjp("mul")
def _mul_vjp(g, out, a, b):
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def affine(x, scale: float, shift: float):
    """``scale * x + shift`` for constant scalars."""
    return _apply("affine", lambda v, scale, shift: scale * v + shift, x, scale=scale, shift=shift)


@defvjp("affine")
def _affine_vjp(g, out, x, scale, shift):
    return (scale * g,)


def square(x):
    return _apply("square", np.square, x)


@defvjp("square")
def _square_vjp(g, out, x):
    return (2.0 * x * g,)


def relu(x):
    return _apply("relu", lambda v: np.maximum(v, 0.0), x)


@defvjp("relu")
def _relu_vjp(g, out, x):
    return (g * (x > 0),)


def _softmax(x, axis):
    shifted = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def softmax(x, axis: int = -1):
    return _apply("softmax", _softmax, x, axis=axis)


@defvjp("softmax")
def _softmax_vjp(g, out, x, axis):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _norm(x, axis):
    return np.sqrt(np.sum(np.square(x), axis=axis, keepdims=True))


def _normalize(x, axis, eps):
    return x / np.maximum(_norm(x, axis), eps)


def normalize(x, axis: int = -1, eps: float = NORM_EPS):
    """``x / max(||x||, eps)`` along ``axis``; an all-zero vector stays zero."""
    return _apply("normalize", _normalize, x, axis=axis, eps=eps)


@defvjp("normalize")
def _normalize_vjp(g, out, x, axis, eps):
    n = _norm(x, axis)
    d = np.maximum(n, eps)
    radial = np.where(n > eps, np.sum(g * out, axis=axis, keepdims=True), 0.0)
    return ((g - out * radial) / d,)


def _squash(x, axis):
    # ||u||^2/(1+||u||^2) * u/||u|| == u * ||u||/(1+||u||^2), which is 0 at u = 0
    n = _norm(x, axis)
    return x * (n / (1.0 + n * n))


def squash(x, axis: int = -1):
    return _apply("squash", _squash, x, axis=axis)


@defvjp("squash")
def _squash_vjp(g, out, x, axis):
    n = _norm(x, axis)
    n2 = n * n
    scale = n / (1.0 + n2)
    dscale = (1.0 - n2) / (1.0 + n2) ** 2
    radial = dscale / np.maximum(n, NORM_EPS) * np.sum(x * g, axis=axis, keepdims=True)
    return (g * scale + x * radial,)


def length(x, axis: int = -1, eps: float = NORM_EPS):
    """Euclidean length along ``axis`` (the axis is dropped)."""
    return _apply("length", lambda v, axis, eps: np.sqrt(np.sum(np.square(v), axis=axis)), x, axis=axis, eps=eps)


@defvjp("length")
def _length_vjp(g, out, x, axis, eps):
    n = np.expand_dims(out, axis)
    return (np.expand_dims(g, axis) * x / np.maximum(n, eps),)


def spmm(m: SparseMatrix, x):
    """Constant sparse matrix times a (possibly taped) dense array."""
    return _apply("spmm", _spmm, m, x)


@defvjp("spmm")
def _spmm_vjp(g, out, m, x):
    return None, _spmm(m.transpose(), g)


def _weighted_spmm(matrices, weights, x):
    return _spmm(weighted_sum(matrices, weights), x)


def weighted_spmm(matrices: tuple[SparseMatrix, ...], weights, x):
    """(Σ_i w_i M_i) @ x, differentiable in both ``weights`` and ``x``."""
    return _apply("weighted_spmm", _weighted_spmm, tuple(matrices), weights, x)


@defvjp("weighted_spmm")
def _weighted_spmm_vjp(g, out, matrices, weights, x):
    gw = np.array([np.sum(g * _spmm(m, x)) for m in matrices])
    gx = _spmm(weighted_sum(matrices, weights).transpose(), g)
    return None, gw, gx


def gather_rows(x, index):
    index = np.asarray(index, dtype=np.int64)
    return _apply("gather_rows", lambda v, index: v[index], x, index=index)


@defvjp("gather_rows")
def _gather_rows_vjp(g, out, x, index):
    gx = np.zeros_like(x, dtype=np.float64)
    np.add.at(gx, index, g)
    return (gx,)


def reduce_sum(x, axis=None):
    return _apply("reduce_sum", lambda v, axis: np.sum(v, axis=axis), x, axis=axis)


@defvjp("reduce_sum")
def _reduce_sum_vjp(g, out, x, axis):
    if axis is None:
        return (np.broadcast_to(g, np.shape(x)).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), np.shape(x)).copy(),)
