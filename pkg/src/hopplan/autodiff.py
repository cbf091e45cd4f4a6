"""Reverse-mode automatic differentiation over float32 numpy arrays.

A Tensor wraps an ndarray and records the operation that produced it, so a
scalar loss can be backpropagated to every leaf marked ``requires_grad``.
The op set is closed and enumerated in ``OP_KINDS``; everything the rest of
the package differentiates (the denoiser forward pass and the guidance cost
graphs) is expressed in these ops, which keeps gradient coverage total.

Broadcasting is restricted to leading batch dimensions plus trailing
lower-rank operands (bias adds); anything fancier is rejected.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "matmul", "add", "mul", "scale", "layer-norm", "softmax-with-mask",
    "gelu", "concat", "slice", "mse", "sum", "exp", "neg", "square-norm",
    "sqrt", "abs", "maximum", "minimum", "split-heads", "merge-heads",
)

_GELU_C = math.sqrt(2.0 / math.pi)

# Finiteness is asserted after every op when enabled. Hot rollout loops may
# disable it and rely on the module-boundary checks in controller/training.
_finite_checks = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf."""


class GraphError(RuntimeError):
    """Raised on invalid backward requests (non-scalar loss, etc.)."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finiteness assertions; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = enabled
    return previous


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording backward closures (inference fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    return arr


class Tensor:
    """Node of the computation graph: a float32 array plus backward wiring.

    Leaves are created directly (``Tensor(data)`` or :func:`parameter`);
    interior nodes are created by ops and hold references to their parents
    and a closure that scatters the incoming gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (), _op: str = "leaf"):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        if _finite_checks and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values out of op '{_op}'")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    """A non-trainable leaf."""
    return Tensor(data, requires_grad=False)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad += g


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _reduce_to_shape(g, a.shape))
        _accumulate(b, _reduce_to_shape(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _reduce_to_shape(g * b.data, a.shape))
        _accumulate(b, _reduce_to_shape(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.asarray(g * np.float32(s), dtype=np.float32))

    return _result(a.data * np.float32(s), (a,), "scale", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, -g)

    return _result(-a.data, (a,), "neg", backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), "exp", backward)


def sqrt(a: Tensor) -> Tensor:
    if _finite_checks and np.any(a.data < 0):
        raise ShapeError("sqrt: negative input")
    out_data = np.sqrt(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (0.5 / np.maximum(out_data, 1e-12)))

    return _result(out_data, (a,), "sqrt", backward)


def absval(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), "abs", backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("maximum", a, b)

    def backward(g: np.ndarray) -> None:
        take_a = (a.data >= b.data).astype(np.float32)
        _accumulate(a, _reduce_to_shape(g * take_a, a.shape))
        _accumulate(b, _reduce_to_shape(g * (1.0 - take_a), b.shape))

    return _result(np.maximum(a.data, b.data), (a, b), "maximum", backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("minimum", a, b)

    def backward(g: np.ndarray) -> None:
        take_a = (a.data <= b.data).astype(np.float32)
        _accumulate(a, _reduce_to_shape(g * take_a, a.shape))
        _accumulate(b, _reduce_to_shape(g * (1.0 - take_a), b.shape))

    return _result(np.minimum(a.data, b.data), (a, b), "minimum", backward)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))  # x**3 spelled out: np.power is slow
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accumulate(a, np.asarray(g * da, dtype=np.float32))

    return _result(out_data, (a,), "gelu", backward)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    """Batched matrix product with optional operand transposes (GEMM-style).

    Leading dimensions broadcast; the last two are contracted as usual.
    """
    ad = np.swapaxes(a.data, -1, -2) if transpose_a else a.data
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul: shapes {a.shape} and {b.shape} do not conform"
            f" (transpose_a={transpose_a}, transpose_b={transpose_b})")
    out_data = np.matmul(ad, bd)

    def backward(g: np.ndarray) -> None:
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if transpose_a:
            ga = np.swapaxes(ga, -1, -2)
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        _accumulate(a, _reduce_to_shape(ga, a.shape))
        _accumulate(b, _reduce_to_shape(gb, b.shape))

    return _result(out_data, (a, b), "matmul", backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv

    def backward(g: np.ndarray) -> None:
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        da = inv * (g - gm - out_data * gy)
        _accumulate(a, np.asarray(da, dtype=np.float32))

    return _result(out_data, (a,), "layer-norm", backward)


def softmax_masked(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with masked positions forced to exactly 0.

    ``mask`` is a boolean array (True = attend) broadcastable to ``a``; it is
    part of the op, not a differentiable input. Rows must keep at least one
    unmasked entry.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"softmax-with-mask: mask {mask.shape} vs input {a.shape}") from None
    x = np.where(mask, a.data, -np.inf)
    xmax = np.max(x, axis=-1, keepdims=True)
    if np.any(~np.isfinite(xmax)):
        raise ShapeError("softmax-with-mask: fully masked row")
    e = np.exp(x - xmax)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        da = out_data * (g - dot)
        _accumulate(a, _reduce_to_shape(np.asarray(da, dtype=np.float32), a.shape))

    return _result(out_data, (a,), "softmax-with-mask", backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    base = list(parts[0].shape)
    ax = axis % len(base)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
                i != ax and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    out_data = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(start, stop)
            _accumulate(p, g[tuple(sl)])

    return _result(out_data, tuple(parts), "concat", backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not (0 <= start < stop <= a.shape[ax]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {ax} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=np.float32)
            full[sl] = g
            _accumulate(a, full)

    return _result(a.data[sl], (a,), "slice", backward)


def split_heads(a: Tensor, heads: int) -> Tensor:
    """(..., T, E) -> (..., heads, T, E/heads); pure data movement."""
    *lead, T, E = a.shape
    if E % heads != 0:
        raise ShapeError(f"split-heads: {E} not divisible by {heads}")
    dh = E // heads
    out_data = a.data.reshape(*lead, T, heads, dh).swapaxes(-2, -3)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.ascontiguousarray(g.swapaxes(-2, -3)).reshape(a.shape))

    return _result(np.ascontiguousarray(out_data), (a,), "split-heads", backward)


def merge_heads(a: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, heads*dh); inverse of split_heads."""
    *lead, h, T, dh = a.shape
    out_data = np.ascontiguousarray(a.data.swapaxes(-2, -3)).reshape(*lead, T, h * dh)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.ascontiguousarray(
            g.reshape(*lead, T, h, dh).swapaxes(-2, -3)))

    return _result(out_data, (a,), "merge-heads", backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full(a.shape, float(g), dtype=np.float32))

    return _result(a.data.sum(), (a,), "sum", backward)


def square_norm(a: Tensor, axis: int | None = -1) -> Tensor:
    """Sum of squares over ``axis`` (or over everything if ``axis`` is None)."""
    if axis is None:
        out_data = np.asarray((a.data ** 2).sum(), dtype=np.float32)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, np.asarray(2.0 * float(g) * a.data, dtype=np.float32))
    else:
        ax = axis % a.ndim
        out_data = (a.data ** 2).sum(axis=ax)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, np.asarray(2.0 * np.expand_dims(g, ax) * a.data,
                                      dtype=np.float32))

    return _result(out_data, (a,), "square-norm", backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of elementwise squared differences, as a scalar."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out_data = np.asarray((diff ** 2).mean(), dtype=np.float32)
    inv_n = 1.0 / diff.size

    def backward(g: np.ndarray) -> None:
        base = np.asarray(2.0 * float(g) * inv_n * diff, dtype=np.float32)
        _accumulate(a, base)
        _accumulate(b, -base)

    return _result(out_data, (a, b), "mse", backward)


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "layer-norm": layer_norm,
    "softmax-with-mask": softmax_masked,
    "gelu": gelu,
    "concat": concat,
    "slice": slice_axis,
    "mse": mse,
    "sum": sum_all,
    "exp": exp,
    "neg": neg,
    "square-norm": square_norm,
    "sqrt": sqrt,
    "abs": absval,
    "maximum": maximum,
    "minimum": minimum,
    "split-heads": split_heads,
    "merge-heads": merge_heads,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Uniform entry point: dispatch ``kind`` over the enumerated op set."""
    if kind not in _OP_TABLE:
        raise ShapeError(f"unknown op kind '{kind}' (known: {sorted(_OP_TABLE)})")
    return _OP_TABLE[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def topo_order(root: Tensor) -> list[Tensor]:
    """All grad-requiring nodes reachable from ``root``, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into leaf ``.grad``.

    Every node is visited exactly once in reverse topological order; the
    gradient of the loss with respect to itself is 1.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any trainable leaf")
    order = topo_order(loss)
    loss.grad = np.asarray(1.0, dtype=np.float32)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # free interior grads; leaves keep theirs
