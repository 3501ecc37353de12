"""
Tensor Engine - rank-4 tensors with define-by-run reverse-mode gradients

Every image, mask and feature map is a Tensor4 of dims (n, c, h, w).
Operations are Function subclasses applied through apply_op(); while a
Tape is active, each op whose inputs need gradients is recorded as a node,
and backward() walks those nodes in reverse to fill leaf gradients.

The engine is dtype-generic: float64 for gradient checks, float32 for
training. Ops keep the dtype of their inputs.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

import config
from errors import ConfigurationError, NumericError, TapeError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Active tapes are confined to the thread that opened them
_local = threading.local()


class Tensor4:
    """Dense (n, c, h, w) array with optional gradient storage."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ConfigurationError(f"Tensor4 needs 4 dims (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # (tape, node index) of the op that produced this tensor, None for leaves
        self._producer = None

    def __repr__(self) -> str:
        return (
            f"<Tensor4 shape={self.shape}, dtype={self.dtype.name}, "
            f"requires_grad={self.requires_grad}>"
        )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() needs a 1x1x1x1 tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor4:
        return Tensor4(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other) -> Tensor4:
        if isinstance(other, Tensor4):
            return apply_op(Add, self, other)
        return apply_op(AddScalar, self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor4:
        if isinstance(other, Tensor4):
            return apply_op(Sub, self, other)
        return apply_op(AddScalar, self, value=-float(other))

    def __rsub__(self, other) -> Tensor4:
        # other - self
        return apply_op(AddScalar, apply_op(ScalarMul, self, factor=-1.0), value=float(other))

    def __mul__(self, other) -> Tensor4:
        if isinstance(other, Tensor4):
            return apply_op(Mul, self, other)
        return apply_op(ScalarMul, self, factor=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor4:
        if isinstance(other, Tensor4):
            raise TypeError("Tensor4 only supports division by a scalar")
        return apply_op(ScalarMul, self, factor=1.0 / float(other))

    def __neg__(self) -> Tensor4:
        return apply_op(ScalarMul, self, factor=-1.0)

    def abs(self) -> Tensor4:
        return apply_op(Abs, self)

    def sum(self) -> Tensor4:
        return apply_op(Sum, self)

    def mean(self) -> Tensor4:
        return apply_op(Mean, self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor4:
    return Tensor4(data, requires_grad=requires_grad, dtype=dtype)


def scalar(value: float, dtype=np.float64) -> Tensor4:
    return Tensor4(np.full((1, 1, 1, 1), value, dtype=dtype))


def check_finite(t: Tensor4, what: str) -> None:
    """Raise NumericError if t holds NaN or Inf."""
    if not np.isfinite(t.data).all():
        raise NumericError(f"Non-finite values in {what}")


# ============================================================
# TAPE
# ============================================================

class Context:
    """Scratch space an op fills in forward and reads back in backward."""
    pass


@dataclass
class TapeNode:
    op: type
    inputs: tuple
    output: Tensor4
    ctx: Context


class Tape:
    """
    Ordered record of differentiable operations.

    Usage:
        with Tape() as tape:
            loss = relu(conv2d(x, w, spec)).mean()
        backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, output: Tensor4, ctx: Context) -> None:
        output._producer = (self, len(self.nodes))
        self.nodes.append(TapeNode(op, tuple(inputs), output, ctx))

    def leaves(self) -> list:
        """Gradient-requiring inputs not produced on this tape, in first-use order."""
        seen = set()
        found = []
        for node in self.nodes:
            for t in node.inputs:
                if not t.requires_grad or id(t) in seen:
                    continue
                if t._producer is not None and t._producer[0] is self:
                    continue
                seen.add(id(t))
                found.append(t)
        return found


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Function:
    """Base class for differentiable ops: stateless forward/backward pairs."""

    @staticmethod
    def forward(ctx: Context, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def apply_op(op, *inputs: Tensor4, **kwargs) -> Tensor4:
    """Run op forward and record it on the active tape when gradients are needed."""
    ctx = Context()
    ctx.needs_input_grad = tuple(t.requires_grad for t in inputs)
    out = op.forward(ctx, *[t.data for t in inputs], **kwargs)

    tape = current_tape()
    requires = tape is not None and any(ctx.needs_input_grad)
    result = Tensor4(out, requires_grad=requires)
    if requires:
        tape.record(op, inputs, result, ctx)
    return result


def backward(tape: Tape, loss: Tensor4) -> None:
    """
    Reverse-accumulate d(loss)/d(leaf) for every gradient-requiring leaf on tape.

    Leaves the loss does not depend on receive zero gradients.

    Raises:
        ConfigurationError: loss is not a 1x1x1x1 tensor recorded on tape
        TapeError: nodes are out of topological order
    """
    if loss.shape != (1, 1, 1, 1):
        raise ConfigurationError(f"backward() needs a 1x1x1x1 loss, got shape {loss.shape}")
    if loss._producer is None or loss._producer[0] is not tape:
        raise ConfigurationError("Loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    start = loss._producer[1]
    visited = set()

    for index in range(start, -1, -1):
        node = tape.nodes[index]
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if index in visited:
            raise TapeError(f"Node {index} ({node.op.__name__}) visited twice")
        visited.add(index)

        input_grads = node.op.backward(node.ctx, g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            producer = inp._producer
            if producer is not None and producer[0] is tape and producer[1] >= index:
                raise TapeError(
                    f"Cycle: node {index} ({node.op.__name__}) consumes output of node {producer[1]}"
                )
            if gi.shape != inp.shape:
                raise TapeError(
                    f"{node.op.__name__} returned gradient of shape {gi.shape} for input {inp.shape}"
                )
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi

    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = g if g is not None else np.zeros_like(leaf.data)

    logger.debug(f"backward: {len(visited)}/{len(tape)} nodes visited")


# ============================================================
# ELEMENTWISE OPS
# ============================================================

def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"Shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded from shape."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape(a, b)
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.shapes
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape(a, b)
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.shapes
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape(a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.a, ctx.b
        da = _unbroadcast(grad * b, a.shape) if ctx.needs_input_grad[0] else None
        db = _unbroadcast(grad * a, b.shape) if ctx.needs_input_grad[1] else None
        return da, db


class ScalarMul(Function):
    @staticmethod
    def forward(ctx, a, factor):
        ctx.factor = factor
        return a * a.dtype.type(factor)

    @staticmethod
    def backward(ctx, grad):
        return (grad * grad.dtype.type(ctx.factor),)


class AddScalar(Function):
    @staticmethod
    def forward(ctx, a, value):
        return a + a.dtype.type(value)

    @staticmethod
    def backward(ctx, grad):
        return (grad,)


class Abs(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.sign = np.sign(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.sign,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.positive = a > 0
        return np.where(ctx.positive, a, 0).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, grad):
        return (np.where(ctx.positive, grad, 0).astype(grad.dtype, copy=False),)


class LeakyRelu(Function):
    @staticmethod
    def forward(ctx, a, slope):
        ctx.positive = a > 0
        ctx.slope = a.dtype.type(slope)
        return np.where(ctx.positive, a, a * ctx.slope)

    @staticmethod
    def backward(ctx, grad):
        return (np.where(ctx.positive, grad, grad * ctx.slope),)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        out = 0.5 * (1.0 + np.tanh(0.5 * a))
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out * (1.0 - ctx.out),)


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid")


def activation(x: Tensor4, kind: str) -> Tensor4:
    """Elementwise relu, leaky_relu (fixed slope) or sigmoid."""
    if kind == "relu":
        return apply_op(Relu, x)
    if kind == "leaky_relu":
        return apply_op(LeakyRelu, x, slope=config.LEAKY_SLOPE)
    if kind == "sigmoid":
        return apply_op(Sigmoid, x)
    raise ConfigurationError(f"Unknown activation '{kind}', expected one of {ACTIVATIONS}")


def relu(x: Tensor4) -> Tensor4:
    return apply_op(Relu, x)


def leaky_relu(x: Tensor4) -> Tensor4:
    return apply_op(LeakyRelu, x, slope=config.LEAKY_SLOPE)


# ============================================================
# REDUCTIONS AND SHAPE OPS
# ============================================================

class Sum(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.shape = a.shape
        return a.sum().reshape(1, 1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        return (np.broadcast_to(grad.reshape(()), ctx.shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.shape = a.shape
        ctx.count = a.size
        return a.mean().reshape(1, 1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        return (np.full(ctx.shape, grad.reshape(()) / ctx.count, dtype=grad.dtype),)


class ConcatChannels(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    @staticmethod
    def backward(ctx, grad):
        return grad[:, :ctx.split].copy(), grad[:, ctx.split:].copy()


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Stack b's channels after a's; n, h and w must agree."""
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise ConfigurationError(
            f"concat_channels needs matching (n, h, w), got {a.shape} and {b.shape}"
        )
    return apply_op(ConcatChannels, a, b)


class SliceSpatial(Function):
    @staticmethod
    def forward(ctx, a, rows, cols):
        ctx.shape = a.shape
        ctx.rows, ctx.cols = rows, cols
        return a[:, :, rows[0]:rows[1], cols[0]:cols[1]].copy()

    @staticmethod
    def backward(ctx, grad):
        out = np.zeros(ctx.shape, dtype=grad.dtype)
        out[:, :, ctx.rows[0]:ctx.rows[1], ctx.cols[0]:ctx.cols[1]] = grad
        return (out,)


def slice_spatial(x: Tensor4, rows: Sequence[int], cols: Sequence[int]) -> Tensor4:
    """x[:, :, r0:r1, c0:c1] with gradient scattered back into place."""
    r0, r1 = rows
    c0, c1 = cols
    if not (0 <= r0 < r1 <= x.h and 0 <= c0 < c1 <= x.w):
        raise ConfigurationError(f"Slice rows={rows} cols={cols} outside {x.shape}")
    return apply_op(SliceSpatial, x, rows=(r0, r1), cols=(c0, c1))


class Gram(Function):
    @staticmethod
    def forward(ctx, a, scale):
        n, c, h, w = a.shape
        feats = a.reshape(n, c, h * w)
        ctx.feats, ctx.scale, ctx.shape = feats, scale, a.shape
        g = np.matmul(feats, feats.transpose(0, 2, 1)) * a.dtype.type(scale)
        return g.reshape(n, 1, c, c)

    @staticmethod
    def backward(ctx, grad):
        n, c = ctx.shape[:2]
        g = grad.reshape(n, c, c)
        d = np.matmul(g + g.transpose(0, 2, 1), ctx.feats) * grad.dtype.type(ctx.scale)
        return (d.reshape(ctx.shape),)


def gram(x: Tensor4, scale: float = 1.0) -> Tensor4:
    """Per-sample channel auto-correlation scale * F F^T, returned as (n, 1, c, c)."""
    return apply_op(Gram, x, scale=scale)
