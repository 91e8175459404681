"""
Dense double-precision tensors with a recorded tape for reverse-mode gradients.

Every op appends a node to the tape of its inputs; `Tape.backward` walks the nodes in
reverse recording order, which is a valid reverse topological order because a node's
inputs are always recorded before it.

A Tape is single-threaded. Separate tapes may read the same parameter arrays
concurrently: ops never write into their inputs.

Kinks (max/min, relu at 0, l2 norm at 0) use a fixed subgradient: ties propagate
through the first attaining index, and the gradient of the norm at the origin is zero.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import settings

logger = logging.getLogger(__name__)

Array = np.ndarray
Operand = Union["Tensor", float, int, np.ndarray]
BackwardFn = Callable[[Array, Tuple[bool, ...]], Tuple[Optional[Array], ...]]


class ShapeMismatchError(ValueError):
    """Raised when an op receives inputs of incompatible shapes."""


class NonFiniteError(ValueError):
    """Raised in checked mode when NaN or Inf reaches an op boundary."""


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    backward: Optional[BackwardFn]
    requires_grad: bool


class Tensor:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: Array, tape: "Tape", node_id: int):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.tape.nodes[self.node_id].op})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.node_id].requires_grad

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatchError(f"item() needs a single value, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Tape:
    """Recorded computation: nodes in the order they were created."""

    def __init__(self, checked: Optional[bool] = None):
        self.nodes: List[Node] = []
        self.checked = settings.checked_mode if checked is None else checked

    def __len__(self) -> int:
        return len(self.nodes)

    def _check_finite(self, op: str, value: Array) -> None:
        if self.checked and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op}: non-finite values in checked mode")

    def _append(self, op: str, value: Array, inputs: Tuple[int, ...],
                backward: Optional[BackwardFn], requires_grad: bool) -> Tensor:
        self.nodes.append(Node(op, inputs, backward, requires_grad))
        return Tensor(value, self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        """Record an input. Arrays are used as-is, never copied or mutated."""
        value = np.asarray(value, dtype=np.float64)
        self._check_finite("leaf", value)
        return self._append("leaf", value, (), None, requires_grad)

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, value: Array, inputs: Sequence[Tensor],
               backward: BackwardFn) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise ValueError(f"{op}: operands belong to different tapes")
        self._check_finite(op, value)
        requires_grad = any(self.nodes[t.node_id].requires_grad for t in inputs)
        return self._append(
            op, value, tuple(t.node_id for t in inputs),
            backward if requires_grad else None, requires_grad,
        )

    def backward(self, output: Tensor, seed: Optional[Array] = None) -> List[Optional[Array]]:
        """Reverse accumulation from `output`; returns one gradient slot per node."""
        if output.tape is not self:
            raise ValueError("Output tensor was not recorded on this tape")
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeMismatchError(f"Seed shape {seed.shape} does not match output {output.shape}")

        grads: List[Optional[Array]] = [None] * len(self.nodes)
        grads[output.node_id] = seed
        for node_id in range(output.node_id, -1, -1):
            g = grads[node_id]
            node = self.nodes[node_id]
            if g is None or node.backward is None:
                continue
            needs = tuple(self.nodes[i].requires_grad for i in node.inputs)
            for i, part in zip(node.inputs, node.backward(g, needs)):
                if part is None:
                    continue
                grads[i] = part if grads[i] is None else grads[i] + part
        return grads

    def gradient(self, output: Tensor, wrt: Sequence[Tensor],
                 seed: Optional[Array] = None) -> List[Array]:
        """Gradients for the requested leaves; leaves off every path get zeros."""
        grads = self.backward(output, seed)
        return [
            grads[t.node_id] if grads[t.node_id] is not None else np.zeros_like(t.value)
            for t in wrt
        ]


def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor],
             seed: Optional[Array] = None) -> List[Array]:
    return tape.gradient(output, wrt, seed)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _lift(tape: Tape, x: Operand) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(np.asarray(x, dtype=np.float64))


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _tanh_grad(y: Array) -> Array:
    return 1.0 - y * y


def _sigmoid(x: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Operand) -> Tensor:
    b = _lift(a.tape, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record(
        "add", a.value + b.value, (a, b),
        lambda g, needs: (_unbroadcast(g, sa) if needs[0] else None,
                          _unbroadcast(g, sb) if needs[1] else None),
    )


def sub(a: Tensor, b: Operand) -> Tensor:
    b = _lift(a.tape, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record(
        "sub", a.value - b.value, (a, b),
        lambda g, needs: (_unbroadcast(g, sa) if needs[0] else None,
                          _unbroadcast(-g, sb) if needs[1] else None),
    )


def mul(a: Tensor, b: Operand) -> Tensor:
    b = _lift(a.tape, b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record(
        "mul", av * bv, (a, b),
        lambda g, needs: (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                          _unbroadcast(g * av, bv.shape) if needs[1] else None),
    )


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return a.tape.record("scale", a.value * k, (a,), lambda g, needs: (g * k,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return a.tape.record("tanh", y, (a,), lambda g, needs: (g * _tanh_grad(y),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return a.tape.record("relu", np.where(mask, a.value, 0.0), (a,),
                         lambda g, needs: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return a.tape.record("exp", y, (a,), lambda g, needs: (g * y,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    x = a.value
    return a.tape.record("softplus", np.logaddexp(0.0, x), (a,),
                         lambda g, needs: (g * _sigmoid(x),))


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c) against a scalar; ties route the gradient to `a`."""
    mask = a.value >= c
    return a.tape.record("maximum", np.where(mask, a.value, c), (a,),
                         lambda g, needs: (g * mask,))


def minimum(a: Tensor, c: float) -> Tensor:
    """Elementwise min(a, c) against a scalar; ties route the gradient to `a`."""
    mask = a.value <= c
    return a.tape.record("minimum", np.where(mask, a.value, c), (a,),
                         lambda g, needs: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    av, bv = a.value, b.value
    return a.tape.record(
        "matmul", av @ bv, (a, b),
        lambda g, needs: (g @ bv.T if needs[0] else None,
                          av.T @ g if needs[1] else None),
    )


def bias_add(a: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    if a.ndim not in (2, 4) or bias.shape != (a.shape[1],):
        raise ShapeMismatchError(f"bias_add: bias {bias.shape} does not fit input {a.shape}")
    if a.ndim == 2:
        value = a.value + bias.value
        reduce_axes = (0,)
    else:
        value = a.value + bias.value.reshape(1, -1, 1, 1)
        reduce_axes = (0, 2, 3)
    return a.tape.record(
        "bias_add", value, (a, bias),
        lambda g, needs: (g if needs[0] else None,
                          g.sum(axis=reduce_axes) if needs[1] else None),
    )


def _im2col(x: Array, k: int) -> Array:
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (B, C, H, W, k, k) -> (B, H, W, C, k, k) -> (B*H*W, C*k*k)
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    b, c, h, w = x.shape
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-1 convolution with zero padding that preserves the spatial size."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatchError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    out_ch, in_ch, kh, kw = kernel.shape
    if in_ch != x.shape[1] or kh != kw or kh % 2 == 0:
        raise ShapeMismatchError(f"conv2d: kernel {kernel.shape} does not fit input {x.shape}")

    b, c, h, w = x.shape
    k = kh
    cols = _im2col(x.value, k)
    wmat = kernel.value.reshape(out_ch, -1)
    out = (cols @ wmat.T).reshape(b, h, w, out_ch).transpose(0, 3, 1, 2)

    def grad_fn(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * h * w, out_ch)
        gx = gk = None
        if needs[1]:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if needs[0]:
            dcols = (g2 @ wmat).reshape(b, h, w, c, k, k)
            pad = k // 2
            dpad = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dpad[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dpad[:, :, pad:pad + h, pad:pad + w]
        return gx, gk

    return x.tape.record("conv2d", np.ascontiguousarray(out), (x, kernel), grad_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatchError(f"maxpool2x2: spatial size must be even, got {x.shape}")
    b, c, h, w = x.shape
    windows = x.value.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g, needs):
        scattered = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        scattered = scattered.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (scattered.reshape(b, c, h, w),)

    return x.tape.record("maxpool2x2", out, (x,), grad_fn)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape.record("flatten", x.value.reshape(shape[0], -1), (x,),
                         lambda g, needs: (g.reshape(shape),))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {old} as {shape}")
    return x.tape.record("reshape", value, (x,), lambda g, needs: (g.reshape(old),))


def block_diagonal(blocks: Tensor) -> Tensor:
    """Stack (n, h, k) blocks into an (n·h, n·k) block-diagonal matrix."""
    if blocks.ndim != 3:
        raise ShapeMismatchError(f"block_diagonal: expected (n, h, k) blocks, got {blocks.shape}")
    n, h, k = blocks.shape
    out = np.zeros((n * h, n * k))
    for i in range(n):
        out[i * h:(i + 1) * h, i * k:(i + 1) * k] = blocks.value[i]

    def grad_fn(g, needs):
        return (np.stack([g[i * h:(i + 1) * h, i * k:(i + 1) * k] for i in range(n)]),)

    return blocks.tape.record("block_diagonal", out, (blocks,), grad_fn)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return x.tape.record("reduce_sum", np.asarray(x.value.sum()), (x,),
                             lambda g, needs: (np.broadcast_to(g, shape),))
    return x.tape.record(
        "reduce_sum", x.value.sum(axis=axis), (x,),
        lambda g, needs: (np.broadcast_to(np.expand_dims(g, axis), shape),),
    )


def _select_along_last(x: Tensor, idx: Array, op: str) -> Tensor:
    shape = x.shape
    out = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g, needs):
        scattered = np.zeros(shape)
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        return (scattered,)

    return x.tape.record(op, out, (x,), grad_fn)


def reduce_max(x: Tensor, exclude: Optional[int] = None) -> Tensor:
    """Max over the last axis, optionally skipping one column (first index wins ties)."""
    values = x.value
    if exclude is not None:
        values = values.copy()
        values[..., exclude] = -np.inf
    return _select_along_last(x, np.argmax(values, axis=-1), "reduce_max")


def reduce_min(x: Tensor) -> Tensor:
    """Min over the last axis (first index wins ties)."""
    return _select_along_last(x, np.argmin(x.value, axis=-1), "reduce_min")


def select(x: Tensor, index: int) -> Tensor:
    """Column `index` of the last axis."""
    if not -x.shape[-1] <= index < x.shape[-1]:
        raise ShapeMismatchError(f"select: index {index} out of range for {x.shape}")
    idx = np.full(x.shape[:-1], index % x.shape[-1], dtype=np.int64)
    return _select_along_last(x, idx, "select")


def inner_product(a: Tensor, b: Operand) -> Tensor:
    """Σ a·b over the last axis."""
    return reduce_sum(mul(a, b), axis=-1)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all entries; zero gradient at the origin."""
    xv = x.value
    norm = float(np.sqrt(np.sum(xv * xv)))

    def grad_fn(g, needs):
        if norm == 0.0:
            return (np.zeros_like(xv),)
        return (g * xv / norm,)

    return x.tape.record("l2_norm", np.asarray(norm), (x,), grad_fn)


def softmax(x: Tensor) -> Tensor:
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g, needs):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return x.tape.record("softmax", y, (x,), grad_fn)


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.value
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = np.mean(log_norm - shifted[rows, labels])

    def grad_fn(g, needs):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (g * probs / z.shape[0],)

    return logits.tape.record("cross_entropy", np.asarray(loss), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """
    Compare reverse-mode gradients of a scalar function against central differences.

    Returns max over elements of |g_ad − g_fd| / max(1e-12, |g_ad| + |g_fd|).
    """
    if h <= 0:
        raise ValueError(f"Step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)

    tape = Tape(checked=False)
    leaf = tape.leaf(x)
    out = f(leaf)
    if out.value.size != 1:
        raise ShapeMismatchError(f"finite_difference_check needs a scalar output, got {out.shape}")
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("finite_difference_check: f(x) is not finite")
    (g_ad,) = tape.gradient(out, [leaf], seed=np.ones_like(out.value))

    def value_at(point: Array) -> float:
        return float(f(Tape(checked=False).leaf(point)).value.reshape(-1)[0])

    g_fd = np.zeros_like(x)
    flat = g_fd.reshape(-1)
    for i in range(x.size):
        plus = x.copy()
        minus = x.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        flat[i] = (value_at(plus) - value_at(minus)) / (2.0 * h)

    denom = np.maximum(1e-12, np.abs(g_ad) + np.abs(g_fd))
    error = float(np.max(np.abs(g_ad - g_fd) / denom)) if x.size else 0.0
    logger.debug("finite difference check on %d entries: max relative error %.3e", x.size, error)
    return error
