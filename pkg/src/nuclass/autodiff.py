"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array together with a gradient accumulator,
parent references, and a local backward rule; calling ``backward()`` on a
scalar-valued node runs the reverse sweep in topological order. The op set
is deliberately small: exactly what the experts, the fusion gate, and their
losses need (matvec, layer normalization, softmax, sigmoid, elementwise
arithmetic, reductions, embedding lookup, concatenation).

Graphs are one-shot: every forward call builds fresh nodes, while parameter
tensors persist across calls and accumulate gradients until ``zero_grad``.
Values are immutable by convention once a node is created.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .core import DimensionError

Array = np.ndarray


def _value(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # collapse leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph (value + gradient accumulator)."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[Array], None] | None = None,
        name: str | None = None,
    ):
        self.value = _value(value)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar-valued node."""
        if self.value.size != 1:
            raise DimensionError("backward() requires a scalar-valued graph output")
        order = _topo_order(self)
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative post-order; only nodes that can influence a gradient matter
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def constant(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accum(t: Tensor, g: Array) -> None:
    if t.requires_grad:
        t.grad += _unbroadcast(g, t.value.shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value + b.value

    def bw(g: Array) -> None:
        _accum(a, g)
        _accum(b, g)

    return Tensor(out_val, parents=(a, b), backward=bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value * b.value

    def bw(g: Array) -> None:
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return Tensor(out_val, parents=(a, b), backward=bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g: Array) -> None:
        _accum(a, -g)

    return Tensor(-a.value, parents=(a,), backward=bw)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (cheaper than a constant-tensor mul)."""
    a = as_tensor(a)

    def bw(g: Array) -> None:
        _accum(a, g * s)

    return Tensor(a.value * s, parents=(a,), backward=bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul expects 2-d operands")
    out_val = a.value @ b.value

    def bw(g: Array) -> None:
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Tensor(out_val, parents=(a, b), backward=bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def bw(g: Array) -> None:
        _accum(a, g * mask)

    return Tensor(np.where(mask, a.value, 0.0), parents=(a,), backward=bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out_val = np.empty_like(x)
    pos = x >= 0
    out_val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_val[~pos] = ex / (1.0 + ex)

    def bw(g: Array) -> None:
        _accum(a, g * out_val * (1.0 - out_val))

    return Tensor(out_val, parents=(a,), backward=bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.tanh(a.value)

    def bw(g: Array) -> None:
        _accum(a, g * (1.0 - out_val * out_val))

    return Tensor(out_val, parents=(a,), backward=bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.exp(a.value)

    def bw(g: Array) -> None:
        _accum(a, g * out_val)

    return Tensor(out_val, parents=(a,), backward=bw)


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below and the
    gradient is zero where the clamp engages."""
    a = as_tensor(a)
    if floor is not None:
        clamped = np.maximum(a.value, floor)
        active = a.value >= floor
    else:
        clamped = a.value
        active = None
    out_val = np.log(clamped)

    def bw(g: Array) -> None:
        local = g / clamped
        if active is not None:
            local = local * active
        _accum(a, local)

    return Tensor(out_val, parents=(a,), backward=bw)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = as_tensor(a)
    x = a.value
    out_val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def bw(g: Array) -> None:
        _accum(a, g * sig)

    return Tensor(out_val, parents=(a,), backward=bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g: Array) -> None:
        _accum(a, g * 2.0 * a.value)

    return Tensor(a.value * a.value, parents=(a,), backward=bw)


def absval(a) -> Tensor:
    """|x|; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    sign = np.sign(a.value)

    def bw(g: Array) -> None:
        _accum(a, g * sign)

    return Tensor(np.abs(a.value), parents=(a,), backward=bw)


def powc(a, exponent: float) -> Tensor:
    """x^k for a fixed real k; requires nonnegative inputs for fractional k."""
    a = as_tensor(a)
    if exponent == 1.0:
        return a
    out_val = np.power(a.value, exponent)

    def bw(g: Array) -> None:
        _accum(a, g * exponent * np.power(a.value, exponent - 1.0))

    return Tensor(out_val, parents=(a,), backward=bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g: Array) -> None:
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.value.shape).copy())

    return Tensor(out_val, parents=(a,), backward=bw)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalization and probability ops (last axis)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Row-wise (x - mean) / sqrt(var + eps), population variance."""
    a = as_tensor(a)
    x = a.value
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm over an empty axis")
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out_val = (x - mean) * inv_std

    def bw(g: Array) -> None:
        # standard layer-norm backward for the biased-variance form
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * out_val).mean(axis=-1, keepdims=True)
        _accum(a, inv_std * (g - g_mean - out_val * gy_mean))

    return Tensor(out_val, parents=(a,), backward=bw)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.value.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=-1, keepdims=True)

    def bw(g: Array) -> None:
        dot = (g * out_val).sum(axis=-1, keepdims=True)
        _accum(a, out_val * (g - dot))

    return Tensor(out_val, parents=(a,), backward=bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.value.shape[-1] < 1:
        raise DimensionError("log_softmax over an empty axis")
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_val = shifted - lse
    probs = np.exp(out_val)

    def bw(g: Array) -> None:
        _accum(a, g - probs * g.sum(axis=-1, keepdims=True))

    return Tensor(out_val, parents=(a,), backward=bw)


# ---------------------------------------------------------------------------
# structural ops


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=axis)
    widths = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return Tensor(out_val, parents=tuple(parts), backward=bw)


def slice_cols(a, lo: int, hi: int) -> Tensor:
    """Narrow along the last axis."""
    a = as_tensor(a)
    out_val = a.value[..., lo:hi].copy()

    def bw(g: Array) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[..., lo:hi] = g
            _accum(a, full)

    return Tensor(out_val, parents=(a,), backward=bw)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("embedding ids must be 1-d")
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise IndexError("embedding id out of range")
    out_val = table.value[ids]

    def bw(g: Array) -> None:
        if table.requires_grad:
            acc = np.zeros_like(table.value)
            np.add.at(acc, ids, g)
            _accum(table, acc)

    return Tensor(out_val, parents=(table,), backward=bw)


def take_per_row(a, idx) -> Tensor:
    """Select one column per row: out[i, 0] = a[i, idx[i]]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.value.shape[0]
    if idx.shape != (n,):
        raise DimensionError("row-index vector must match the batch size")
    rows = np.arange(n)
    out_val = a.value[rows, idx][:, None]

    def bw(g: Array) -> None:
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            np.add.at(acc, (rows, idx), g[:, 0])
            _accum(a, acc)

    return Tensor(out_val, parents=(a,), backward=bw)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
) -> float:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` must rebuild (and return) a scalar-valued graph from the current
    parameter values on every call. Returns the worst unified relative error
    over all parameter entries: ``|analytic - numeric| / max(scale, 0.01)``
    with ``scale = max(|analytic|, |numeric|)``, so the pass thresholds
    "relative 1e-4, absolute 1e-6 near zero" collapse to a single 1e-4 bound.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = fn()
    if out.value.size != 1:
        raise DimensionError("grad_check requires a scalar-valued graph output")
    out.backward()
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(fn().value)
            flat[j] = orig - step
            f_minus = float(fn().value)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(ana.reshape(-1)[j])
            scale_ = max(abs(a), abs(numeric), 1e-2)
            worst = max(worst, abs(a - numeric) / scale_)
    for p in params:
        p.zero_grad()
    return worst
