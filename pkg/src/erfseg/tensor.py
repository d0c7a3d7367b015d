"""Dense float tensors with tape-based reverse-mode differentiation.

Tensors wrap a numpy array (row-major); ops record nodes on the active
tape in execution order, and the backward pass replays the nodes in exact
reverse order, accumulating gradients so that shared parameters receive
the sum of all their per-use contributions.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense N-dimensional array of real scalars plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None  # same-shape ndarray once accumulated

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded differentiable op: kind, inputs, output, backward closure."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs, output: Tensor, backward):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; inputs always precede their node."""

    def __init__(self):
        self._nodes: list[TapeNode] = []

    @property
    def nodes(self):
        return tuple(self._nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, node: TapeNode):
        self._nodes.append(node)

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(tensor) to every requires_grad tensor on the tape."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue  # never reached from the loss
            node.backward(g)


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


def accumulate_grad(t: Tensor, g: np.ndarray, fresh: bool = False):
    """Add a gradient contribution; `fresh` means g is owned by the caller."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, copy=True)
    else:
        t.grad += g


def record_op(op: str, inputs, out: Tensor, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(TapeNode(op, inputs, out, backward_fn))
    return out


def _check_same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        # g is dead after this node; the second accumulate may take ownership
        accumulate_grad(b, g)
        accumulate_grad(a, g, fresh=True)

    return record_op("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (Hadamard)."""
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        accumulate_grad(a, g * b.data, fresh=True)
        np.multiply(g, a.data, out=g)
        accumulate_grad(b, g, fresh=True)

    return record_op("mul", (a, b), out, bwd)


mul_elementwise = mul


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        np.multiply(g, x.data > 0, out=g)
        accumulate_grad(x, g, fresh=True)

    return record_op("relu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output clamped into the open interval (0, 1)."""
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    one = x.data.dtype.type(1)
    zero = x.data.dtype.type(0)
    # saturation rounds to exactly 0/1 in finite precision; pull back one ulp
    np.clip(y, np.nextafter(zero, one), np.nextafter(one, zero), out=y)
    out = Tensor(y)

    def bwd(g):
        dy = (1.0 - y) * y
        np.multiply(g, dy, out=g)
        accumulate_grad(x, g, fresh=True)

    return record_op("sigmoid", (x,), out, bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))

    def bwd(g):
        start = 0
        for t in tensors:
            n = t.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            accumulate_grad(t, g[tuple(sl)])
            start += n

    return record_op("concat", tensors, out, bwd)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g, x.shape))

    return record_op("sum", (x,), out, bwd)
