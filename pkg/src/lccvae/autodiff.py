"""Small reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that belong to it.
:func:`backward` walks the tape once in reverse and returns gradients for the
leaves.  Tensors created without a tape are constants and never record.

    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0, 3.0])
    >>> loss = sum_all(square(x))
    >>> backward(tape, loss)[x]
    array([2., 4., 6.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "AdamState",
    "as_tensor",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "exp",
    "log",
    "tanh",
    "softplus",
    "square",
    "negate",
    "relu",
    "clip",
    "scale",
    "add_row",
    "sum_all",
    "sum_rows",
    "mean_all",
    "slice_cols",
    "concat_cols",
    "backward",
    "Gradients",
    "adam_step",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an op's domain (e.g. log of a non-positive)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or inf from finite inputs."""


class Tensor:
    """A float64 array that may be a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int = -1):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major contiguous copy of the values."""
        return np.ascontiguousarray(self.data).ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f"node={self.id}" if self.tape is not None else "const"
        return f"Tensor({self.data!r}, {tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Op:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive ops.  Not thread-safe; use one per worker."""

    ops: list[_Op] = field(default_factory=list)
    leaves: dict[int, tuple[int, ...]] = field(default_factory=dict)
    _count: int = 0

    def _new_id(self) -> int:
        self._count += 1
        return self._count - 1

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, self._new_id())
        self.leaves[t.id] = t.shape
        return t

    def __len__(self) -> int:
        return len(self.ops)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, kind: str) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check_finite(out, kind)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    res = Tensor(out, tape, tape._new_id())
    tape.ops.append(_Op(kind, tuple(t.id for t in inputs), res.id, vjp))
    return res


def matmul(a, b) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {A.shape} and {B.shape}")

    def vjp(g):
        return g @ B.T, A.T @ g

    return _record("matmul", (a, b), A @ B, vjp)


def _binary_shapes(kind, A, B):
    """Equal shapes, or one single-element operand broadcast as a scalar."""
    if A.shape == B.shape:
        return A, B
    if B.size == 1:
        return A, B.reshape(())
    if A.size == 1:
        return A.reshape(()), B
    raise DimensionError(f"{kind}: shape mismatch {A.shape} vs {B.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    A, B = _binary_shapes("add", a.data, b.data)
    return _record("add", (a, b), A + B,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    A, B = _binary_shapes("sub", a.data, b.data)
    return _record("sub", (a, b), A - B,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    A, B = _binary_shapes("mul", a.data, b.data)
    return _record("mul", (a, b), A * B,
                   lambda g: (_unbroadcast(g * B, sa), _unbroadcast(g * A, sb)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by _record
        out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    if np.any(A <= 0):
        idx = np.argwhere(A <= 0)[0]
        raise DomainError(f"log of non-positive value {A[tuple(idx)]!r} at index {tuple(int(i) for i in idx)}")
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) evaluated as max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    A = a.data
    out = np.maximum(A, 0.0) + np.log1p(np.exp(-np.abs(A)))
    # sigmoid, overflow-safe
    e = np.exp(-np.abs(A))
    sig = np.where(A >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("softplus", (a,), out, lambda g: (g * sig,))


def square(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _record("square", (a,), A * A, lambda g: (2.0 * g * A,))


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _record("negate", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    A = a.data
    mask = A > 0
    return _record("relu", (a,), np.where(mask, A, 0.0), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    A = a.data
    mask = (A >= lo) & (A <= hi)
    return _record("clip", (a,), np.clip(A, lo, hi), lambda g: (g * mask,))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python/numpy constant (not differentiated)."""
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_row(a, row) -> Tensor:
    """Add a length-n vector to every row of an (m, n) tensor (bias add)."""
    a, row = as_tensor(a), as_tensor(row)
    A, r = a.data, row.data
    if A.ndim != 2 or r.shape != (A.shape[1],):
        raise DimensionError(f"add_row: shapes {A.shape} and {r.shape} do not broadcast by row")
    return _record("add_row", (a, row), A + r, lambda g: (g, g.sum(axis=0)))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    return _record("sum_all", (a,), np.asarray(a.data.sum()),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def sum_rows(a) -> Tensor:
    """Sum each row of an (m, n) tensor, giving shape (m,)."""
    a = as_tensor(a)
    A = a.data
    if A.ndim != 2:
        raise DimensionError(f"sum_rows: expected 2-d tensor, got shape {A.shape}")
    n = A.shape[1]
    return _record("sum_rows", (a,), A.sum(axis=1),
                   lambda g: (np.repeat(g[:, None], n, axis=1),))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    A = a.data
    if A.ndim != 2 or not 0 <= start <= stop <= A.shape[1]:
        raise DimensionError(f"slice_cols: bad range [{start}, {stop}) for shape {A.shape}")

    def vjp(g):
        full = np.zeros_like(A)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", (a,), A[:, start:stop].copy(), vjp)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise DimensionError(f"concat_cols: cannot join shapes {A.shape} and {B.shape}")
    k = A.shape[1]
    return _record("concat_cols", (a, b), np.concatenate([A, B], axis=1),
                   lambda g: (g[:, :k], g[:, k:]))


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "softplus": softplus,
          "square": square, "negate": negate}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def backward(tape: Tape, loss: Tensor) -> dict[Tensor | int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf of ``tape``.

    The returned mapping is keyed by leaf node id and also accepts the leaf
    tensor itself as a key.  Leaves the loss does not depend on get a zero
    array.  The tape itself is left untouched, so calling this
    twice gives identical results.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(op.output, None)
        if g is None:
            continue
        for nid, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or nid < 0:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = np.array(gi, dtype=np.float64)
    out = Gradients()
    for lid, shape in tape.leaves.items():
        out[lid] = grads[lid] if lid in grads else np.zeros(shape)
    out._tape = tape
    return out


class Gradients(dict):
    """Leaf id -> gradient; indexing with the leaf tensor also works."""

    _tape: Tape | None = None

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            if key.tape is not self._tape or not dict.__contains__(self, key.id):
                raise KeyError(f"{key!r} is not a leaf of this tape")
            key = key.id
        return dict.__getitem__(self, key)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns new arrays; inputs are not modified."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
    if not len(params) == len(grads) == len(state.m) == len(state.v):
        raise DimensionError("adam_step: params, grads and state differ in length")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.shape == g.shape == m.shape == v.shape:
            raise DimensionError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)
