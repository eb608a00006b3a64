"""Dense 2-D arrays with tape-based reverse-mode differentiation.

Every array is float64 and strictly two-dimensional. Operations on arrays that
belong to a :class:`Tape` are recorded together with a closure computing the
local vector-Jacobian product; arrays without a tape are constants and cost
nothing beyond the numpy call.

    tape = Tape()
    w = tape.param("w", np.ones((2, 3)))
    loss = sum_all(w * w)
    grads = tape.backward(loss)
    grads["w"]          # == 2 * w
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class DiffArray:
    """A float64 matrix, optionally attached to a differentiation tape."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"DiffArray must be 2-D, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def __repr__(self):
        tag = f"node={self.node}" if self.node is not None else "const"
        return f"DiffArray({self.rows}x{self.cols}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self._backward_fns: list[Callable | None] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._shapes: list[tuple[int, int]] = []
        self.params: dict[str, DiffArray] = {}

    def __len__(self):
        return len(self._shapes)

    def _new_node(self, shape, parents=(), backward_fn=None) -> int:
        self._backward_fns.append(backward_fn)
        self._parents.append(tuple(parents))
        self._shapes.append(shape)
        return len(self._shapes) - 1

    def leaf(self, value) -> DiffArray:
        value = np.array(value, dtype=np.float64)
        arr = DiffArray(value, self)
        arr.node = self._new_node(arr.shape)
        return arr

    def param(self, name: str, value) -> DiffArray:
        """Register a named leaf whose gradient is reported by :meth:`backward`."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered on this tape")
        arr = self.leaf(value)
        self.params[name] = arr
        return arr

    def lift(self, x: DiffArray) -> DiffArray:
        """Return ``x`` if it lives on this tape, otherwise a constant copy of its value."""
        if x.tape is self:
            return x
        return DiffArray(x.value)

    def backward(self, loss: DiffArray) -> "Gradients":
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._shapes)
        if loss.tape is self and loss.node is not None:
            grads[loss.node] = np.ones((1, 1))
            for i in range(loss.node, -1, -1):
                g = grads[i]
                fn = self._backward_fns[i]
                if g is None or fn is None:
                    continue
                parents = self._parents[i]
                for p, gp in zip(parents, fn(g)):
                    if p is None or gp is None:
                        continue
                    if grads[p] is None:
                        grads[p] = gp
                    else:
                        grads[p] = grads[p] + gp
        return Gradients(self, grads)


class Gradients:
    """Gradients of one backward pass, keyed by parameter name or array."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def of(self, x: DiffArray) -> np.ndarray:
        if x.tape is not self._tape or x.node is None:
            return np.zeros(x.shape)
        g = self._grads[x.node]
        return np.zeros(x.shape) if g is None else g

    def __getitem__(self, name: str) -> np.ndarray:
        return self.of(self._tape.params[name])

    def items(self):
        for name, arr in self._tape.params.items():
            yield name, self.of(arr)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.items())


def const(value) -> DiffArray:
    return value if type(value) is DiffArray else DiffArray(value)


def _tape_of(*arrays: DiffArray) -> Tape | None:
    tape = None
    for a in arrays:
        if a.node is not None:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _wrap(value: np.ndarray, tape: Tape | None = None, node: int | None = None) -> DiffArray:
    # internal constructor: value is already a 2-D float64 array
    out = DiffArray.__new__(DiffArray)
    out.value = value
    out.tape = tape
    out.node = node
    return out


def _record(value: np.ndarray, inputs: Sequence[DiffArray], backward_fn) -> DiffArray:
    tape = _tape_of(*inputs)
    if tape is None:
        return _wrap(value)
    node = tape._new_node(value.shape, [a.node for a in inputs], backward_fn)
    return _wrap(value, tape, node)


def _check_broadcast(a: DiffArray, b: DiffArray, op: str) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or (sb[0] == 1 and sb[1] == sa[1]):
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are incompatible")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} are incompatible")
    need_a, need_b = a.node is not None, b.node is not None

    def backward(g):
        return (g @ bv.T if need_a else None, av.T @ g if need_b else None)

    return _record(av @ bv, (a, b), backward)


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    """Elementwise sum; ``b`` may be a 1 x cols row vector added to every row."""
    a, b = const(a), const(b)
    _check_broadcast(a, b, "add")
    bshape = b.value.shape
    return _record(a.value + b.value, (a, b), lambda g: (g, _unbroadcast(g, bshape)))


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = const(a), const(b)
    _check_broadcast(a, b, "sub")
    bshape = b.value.shape
    return _record(a.value - b.value, (a, b), lambda g: (g, -_unbroadcast(g, bshape)))


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = const(a), const(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    bshape = bv.shape
    need_a, need_b = a.node is not None, b.node is not None

    def backward(g):
        return (g * bv if need_a else None, _unbroadcast(g * av, bshape) if need_b else None)

    return _record(av * bv, (a, b), backward)


def scale(a: DiffArray, c: float) -> DiffArray:
    a = const(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def sigmoid(a: DiffArray) -> DiffArray:
    a = const(a)
    x = a.value
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: DiffArray) -> DiffArray:
    a = const(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: DiffArray) -> DiffArray:
    a = const(a)
    on = a.value > 0
    return _record(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def absolute(a: DiffArray) -> DiffArray:
    """Elementwise |a|; the subgradient at 0 is taken as 0."""
    a = const(a)
    sign = np.sign(a.value)
    return _record(np.abs(a.value), (a,), lambda g: (g * sign,))


def row_norms(a: DiffArray) -> DiffArray:
    """Euclidean norm of every row, as a rows x 1 column.

    Rows that are exactly zero get a zero gradient instead of NaN.
    """
    a = const(a)
    av = a.value
    norms = np.sqrt(np.sum(av * av, axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        return (np.where(norms > 0, g / safe, 0.0) * av,)

    return _record(norms, (a,), backward)


def row_sq_norms(a: DiffArray) -> DiffArray:
    a = const(a)
    av = a.value
    return _record(np.sum(av * av, axis=1, keepdims=True), (a,), lambda g: (2.0 * g * av,))


def transpose(a: DiffArray) -> DiffArray:
    a = const(a)
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: DiffArray) -> DiffArray:
    a = const(a)
    shape = a.shape
    return _record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: DiffArray) -> DiffArray:
    a = const(a)
    shape = a.shape
    n = a.value.size
    if n == 0:
        raise ContractError("mean_all of an empty array")
    return _record(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),)
    )


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------


def concat_cols(arrays: Iterable[DiffArray]) -> DiffArray:
    arrays = [const(a) for a in arrays]
    if not arrays:
        raise ContractError("concat_cols of nothing")
    rows = arrays[0].rows
    for a in arrays:
        if a.rows != rows:
            raise DimensionError(
                f"concat_cols: row counts differ {[x.shape for x in arrays]}"
            )
    bounds = np.cumsum([0] + [a.cols for a in arrays])
    out = np.concatenate([a.value for a in arrays], axis=1)
    return _record(
        out,
        arrays,
        lambda g: [g[:, bounds[i] : bounds[i + 1]] for i in range(len(arrays))],
    )


def concat_rows(arrays: Iterable[DiffArray]) -> DiffArray:
    arrays = [const(a) for a in arrays]
    if not arrays:
        raise ContractError("concat_rows of nothing")
    cols = arrays[0].cols
    for a in arrays:
        if a.cols != cols:
            raise DimensionError(
                f"concat_rows: column counts differ {[x.shape for x in arrays]}"
            )
    bounds = np.cumsum([0] + [a.rows for a in arrays])
    out = np.concatenate([a.value for a in arrays], axis=0)
    return _record(
        out,
        arrays,
        lambda g: [g[bounds[i] : bounds[i + 1]] for i in range(len(arrays))],
    )


def slice_rows(a: DiffArray, start: int, stop: int) -> DiffArray:
    a = const(a)
    if not 0 <= start <= stop <= a.rows:
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record(a.value[start:stop].copy(), (a,), backward)


def slice_cols(a: DiffArray, start: int, stop: int) -> DiffArray:
    a = const(a)
    if not 0 <= start <= stop <= a.cols:
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.value[:, start:stop].copy(), (a,), backward)


def gather_rows(a: DiffArray, index) -> DiffArray:
    """Rows of ``a`` picked by an integer index (repeats allowed)."""
    a = const(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.rows):
        raise DimensionError(f"gather_rows index out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.value[index], (a,), backward)


def stop_gradient(a: DiffArray) -> DiffArray:
    return DiffArray(const(a).value)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def softmax_rows(a: DiffArray, allowed: np.ndarray | None = None) -> DiffArray:
    """Row-wise softmax with max subtraction.

    ``allowed`` optionally restricts each row to a subset of columns; excluded
    entries get exactly zero weight. Every row must keep at least one entry.
    """
    a = const(a)
    x = a.value
    if allowed is not None:
        if allowed.shape != x.shape:
            raise DimensionError(f"softmax mask {allowed.shape} vs scores {x.shape}")
        x = np.where(allowed, x, -np.inf)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _record(out, (a,), backward)


def layer_norm(
    a: DiffArray, gain: DiffArray, bias: DiffArray, eps: float = LAYER_NORM_EPS
) -> DiffArray:
    a, gain, bias = const(a), const(gain), const(bias)
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be (1, {a.cols})"
        )
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value

    def backward(g):
        gx = g * gv
        dx = inv * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * np.mean(gx * xhat, axis=1, keepdims=True)
        )
        return dx, np.sum(g * xhat, axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record(out, (a, gain, bias), backward)
