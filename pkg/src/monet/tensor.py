"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Every differentiable operation is a free function that computes its value
with numpy and, while a ``Tape`` is active, appends a node describing the
computation.  ``backward`` replays the recorded nodes in reverse, which keeps
gradient accumulation deterministic (two passes over the same tape are
bit-identical) and lets ``jacobian`` extract exact structural sparsity:
a coordinate never touched by the reverse sweep stays exactly 0.0.

There is no broadcasting: binary operations demand equal shapes, and the one
matrix-plus-row-vector case that batched cells need is its own explicit
operation (``add_rowvec``).
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradientError(ValueError):
    """Backward-pass contract violation (e.g. non-scalar loss)."""


_next_id = itertools.count()

# Innermost entry wins; ``None`` marks a paused-recording scope.
_TAPE_STACK: list["Tape | None"] = []


class Tensor:
    """A dense float64 array, optionally carrying a gradient buffer.

    ``data`` is treated as immutable once the tensor participates in a
    recorded computation; parameter updates rebind ``data`` to a fresh array
    instead of writing through it.  ``grad`` is only ever assigned by
    ``backward`` (accumulating across calls) or cleared by ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_next_id)

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
            raise GradientError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class TapeNode:
    __slots__ = ("op", "inputs", "outputs", "saved")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], outputs: tuple[Tensor, ...], saved: tuple):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.saved = saved


class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


class pause_recording:
    """Context manager that suspends recording on any active tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def _record(op: str, inputs: tuple[Tensor, ...], outputs: tuple[Tensor, ...], saved: tuple = ()) -> None:
    if _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        if tape is not None:
            tape.nodes.append(TapeNode(op, inputs, outputs, saved))


def _out(data: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    return Tensor(data, requires_grad=any(t.requires_grad for t in inputs))


def _require_equal_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes must match exactly, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_equal_shapes("add", a, b)
    out = _out(a.data + b.data, (a, b))
    _record("add", (a, b), (out,))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_equal_shapes("sub", a, b)
    out = _out(a.data - b.data, (a, b))
    _record("sub", (a, b), (out,))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_equal_shapes("mul", a, b)
    out = _out(a.data * b.data, (a, b))
    _record("mul", (a, b), (out,))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _out(a.data * c, (a,))
    _record("scale", (a,), (out,), (c,))
    return out


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-D vector to every row of an (N, D) matrix."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: need (N, D) and (D,), got {m.shape} and {v.shape}")
    out = _out(m.data + v.data, (m, v))
    _record("add_rowvec", (m, v), (out,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: both operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, got {a.shape} and {b.shape}")
    out = _out(a.data @ b.data, (a, b))
    _record("matmul", (a, b), (out,))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: need a 2-D tensor, got {a.shape}")
    out = _out(a.data.T.copy(), (a,))
    _record("transpose", (a,), (out,))
    return out


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)
    out = _out(y, (a,))
    _record("sigmoid", (a,), (out,), (y,))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _out(y, (a,))
    _record("tanh", (a,), (out,), (y,))
    return out


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0: the mask is a strict inequality.
    mask = a.data > 0
    out = _out(np.where(mask, a.data, 0.0), (a,))
    _record("relu", (a,), (out,), (mask,))
    return out


def abs_(a: Tensor) -> Tensor:
    out = _out(np.abs(a.data), (a,))
    _record("abs", (a,), (out,), (np.sign(a.data),))
    return out


_ELEMENTWISE: dict[str, Callable] = {}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch an elementwise operation by name: add, mul, sigmoid, tanh, relu."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"elementwise: unknown op {op!r}; known: {sorted(_ELEMENTWISE)}") from None
    return fn(*inputs)


_ELEMENTWISE.update({"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "relu": relu})


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar (shape ()) tensor."""
    out = _out(np.asarray(a.data.sum()), (a,))
    _record("sum", (a,), (out,), (a.shape,))
    return out


def sum_axis0(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"sum_axis0: need a 2-D tensor, got {a.shape}")
    out = _out(a.data.sum(axis=0), (a,))
    _record("sum_axis0", (a,), (out,), (a.shape[0],))
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape).copy()
    out = _out(data, (a,))
    _record("reshape", (a,), (out,), (a.shape,))
    return out


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: ranks differ, got {a.shape} and {b.shape}")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"concat: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    for d in range(a.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} disagree off axis {axis}")
    out = _out(np.concatenate([a.data, b.data], axis=axis), (a, b))
    _record("concat", (a, b), (out,), (axis, a.shape[axis]))
    return out


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> tuple[Tensor, ...]:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"split: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of shape {a.shape}")
    offsets = np.cumsum(sizes)[:-1]
    parts = np.split(a.data, offsets, axis=axis)
    outs = tuple(_out(p.copy(), (a,)) for p in parts)
    _record("split", (a,), outs, (axis, tuple(sizes)))
    return outs


def row(m: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a 2-D tensor as a (D,) tensor."""
    if m.ndim != 2:
        raise ShapeError(f"row: need a 2-D tensor, got {m.shape}")
    if not 0 <= i < m.shape[0]:
        raise ShapeError(f"row: index {i} out of range for shape {m.shape}")
    out = _out(m.data[i].copy(), (m,))
    _record("row", (m,), (out,), (i, m.shape))
    return out


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape (D,) into a (T, D) tensor."""
    if not rows:
        raise ShapeError("stack_rows: need at least one row")
    for r in rows:
        if r.ndim != 1 or r.shape != rows[0].shape:
            raise ShapeError(f"stack_rows: rows must share a 1-D shape, got {[t.shape for t in rows]}")
    out = _out(np.stack([r.data for r in rows]), tuple(rows))
    _record("stack_rows", tuple(rows), (out,))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(y, (a,))
    _record("softmax", (a,), (out,), (y,))
    return out


def group_softmax(stack: Sequence[Tensor]) -> tuple[Tensor, ...]:
    """Coordinate-wise softmax across k equally-shaped tensors.

    For every coordinate, the k outputs are the softmax of the k stacked
    input values: positive and summing to 1.
    """
    if len(stack) < 2:
        raise ShapeError(f"group_softmax: need at least 2 tensors, got {len(stack)}")
    shape = stack[0].shape
    for t in stack:
        if t.shape != shape:
            raise ShapeError(f"group_softmax: shapes differ: {[t.shape for t in stack]}")
    v = np.stack([t.data for t in stack])
    e = np.exp(v - v.max(axis=0))
    y = e / e.sum(axis=0)
    outs = tuple(_out(y[i], tuple(stack)) for i in range(len(stack)))
    _record("group_softmax", tuple(stack), outs, (y,))
    return outs


# ---------------------------------------------------------------------------
# Backward rules
# ---------------------------------------------------------------------------
# Each rule maps (node, per-output gradients) to per-input gradients.  A None
# output gradient means nothing reached that output; rules see zeros instead.

def _bw_add(node, gs):
    (g,) = gs
    return g, g


def _bw_sub(node, gs):
    (g,) = gs
    return g, -g


def _bw_mul(node, gs):
    (g,) = gs
    a, b = node.inputs
    return g * b.data, g * a.data


def _bw_scale(node, gs):
    (g,) = gs
    (c,) = node.saved
    return (g * c,)


def _bw_add_rowvec(node, gs):
    (g,) = gs
    return g, g.sum(axis=0)


def _bw_matmul(node, gs):
    (g,) = gs
    a, b = node.inputs
    return g @ b.data.T, a.data.T @ g


def _bw_transpose(node, gs):
    (g,) = gs
    return (g.T,)


def _bw_sigmoid(node, gs):
    (g,) = gs
    (y,) = node.saved
    return (g * y * (1.0 - y),)


def _bw_tanh(node, gs):
    (g,) = gs
    (y,) = node.saved
    return (g * (1.0 - y * y),)


def _bw_relu(node, gs):
    (g,) = gs
    (mask,) = node.saved
    return (np.where(mask, g, 0.0),)


def _bw_abs(node, gs):
    (g,) = gs
    (sign,) = node.saved
    return (g * sign,)


def _bw_sum(node, gs):
    (g,) = gs
    (shape,) = node.saved
    return (np.full(shape, float(g)),)


def _bw_sum_axis0(node, gs):
    (g,) = gs
    (n,) = node.saved
    return (np.tile(g, (n, 1)),)


def _bw_reshape(node, gs):
    (g,) = gs
    (shape,) = node.saved
    return (g.reshape(shape),)


def _bw_concat(node, gs):
    (g,) = gs
    axis, first = node.saved
    return np.split(g, [first], axis=axis)


def _bw_split(node, gs):
    axis, sizes = node.saved
    parts = []
    for size, g in zip(sizes, gs):
        if g is None:
            shape = list(node.inputs[0].shape)
            shape[axis] = size
            parts.append(np.zeros(shape))
        else:
            parts.append(g)
    return (np.concatenate(parts, axis=axis),)


def _bw_row(node, gs):
    (g,) = gs
    i, shape = node.saved
    full = np.zeros(shape)
    full[i] = g
    return (full,)


def _bw_stack_rows(node, gs):
    (g,) = gs
    return tuple(g[i] for i in range(len(node.inputs)))


def _bw_softmax(node, gs):
    (g,) = gs
    (y,) = node.saved
    inner = (g * y).sum(axis=-1, keepdims=True)
    return (y * (g - inner),)


def _bw_group_softmax(node, gs):
    (y,) = node.saved
    g = np.stack([np.zeros(y.shape[1:]) if gi is None else gi for gi in gs])
    inner = (g * y).sum(axis=0)
    d = y * (g - inner)
    return tuple(d[i] for i in range(len(node.inputs)))


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "add_rowvec": _bw_add_rowvec,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "relu": _bw_relu,
    "abs": _bw_abs,
    "sum": _bw_sum,
    "sum_axis0": _bw_sum_axis0,
    "reshape": _bw_reshape,
    "concat": _bw_concat,
    "split": _bw_split,
    "row": _bw_row,
    "stack_rows": _bw_stack_rows,
    "softmax": _bw_softmax,
    "group_softmax": _bw_group_softmax,
}


def _sweep(tape: Tape, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Replay the tape in reverse, returning accumulated gradients by tensor id."""
    acc = dict(seeds)
    for node in reversed(tape.nodes):
        gs = tuple(acc.get(t.id) for t in node.outputs)
        if all(g is None for g in gs):
            continue
        in_grads = BACKWARD_RULES[node.op](node, gs)
        for t, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            prev = acc.get(t.id)
            acc[t.id] = g if prev is None else prev + g
    return acc


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor that ``loss`` reaches.

    Repeated calls accumulate into existing gradients; clear with
    ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    acc = _sweep(tape, {loss.id: np.ones(loss.shape)})
    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs + node.outputs:
            if t.id in seen:
                continue
            seen.add(t.id)
            if t.requires_grad and t.id in acc:
                g = acc[t.id]
                t.grad = g.copy() if t.grad is None else t.grad + g
    if loss.requires_grad and loss.id not in seen:
        t = loss
        t.grad = acc[t.id].copy() if t.grad is None else t.grad + acc[t.id]


def jacobian(output: Tensor, wrt: Tensor, tape: Tape) -> np.ndarray:
    """Full jacobian d(output)/d(wrt) of shape (output.size, wrt.size).

    Runs one reverse sweep per output coordinate; entries with no path from
    ``wrt`` to ``output`` come out exactly 0.0.
    """
    jac = np.zeros((output.size, wrt.size))
    for j in range(output.size):
        seed = np.zeros(output.size)
        seed[j] = 1.0
        acc = _sweep(tape, {output.id: seed.reshape(output.shape)})
        g = acc.get(wrt.id)
        if g is not None:
            jac[j] = g.ravel()
    return jac


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function at ``x``.

    Evaluations run with recording paused, so this stays an independent
    oracle for the tape-based backward pass.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: step must be positive, got {h}")

    def _eval(arr: np.ndarray) -> float:
        with pause_recording():
            y = f(Tensor(arr))
        return y.item() if isinstance(y, Tensor) else float(y)

    base = x.data.ravel()
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        up = _eval(bumped.reshape(x.shape))
        bumped[i] = base[i] - h
        down = _eval(bumped.reshape(x.shape))
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max per-coordinate |a-b| / max(1, |a|, |b|), the gradient-check metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
