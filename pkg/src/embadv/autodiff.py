"""Reverse-mode automatic differentiation over dense float64 arrays.

Each differentiable op produces a :class:`Tensor` carrying a :class:`Node`
that remembers its inputs and a closure mapping the output gradient to the
input gradients. :func:`backward` orders the graph into a :class:`Tape` and
walks it once in reverse.

Broadcasting is deliberately narrow: a python scalar may meet any tensor, and
a vector may be added to the last axis of a tensor (row-wise bias). Any other
shape disagreement is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    """Dense float64 array with an optional gradient tape node."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only supported by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def log_softmax(self) -> "Tensor":
        return log_softmax(self)

    def softmax(self) -> "Tensor":
        return softmax(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Record a new op on the graph.

    ``backward`` receives the gradient of the output and returns one gradient
    (or ``None``) per input, in order. Exposed so callers can register ops the
    module does not ship.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data, dtype=np.float64), requires)
    if requires:
        out.node = Node(op, tuple(inputs), backward)
    return out


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        if not np.isscalar(b):
            raise TypeError("add: right operand must be a Tensor or python scalar")
        return make_op("add_scalar", a.data + float(b), (a,), lambda g: (g,))
    if a.shape == b.shape:
        return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))
    if _is_bias(a, b):
        axes = tuple(range(a.ndim - 1))
        return make_op("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise _shape_error("add", a.shape, b.shape)


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(neg(b), float(a))
    if a.shape == b.shape:
        return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    if _is_bias(a, b):
        axes = tuple(range(a.ndim - 1))
        return make_op("sub_bias", a.data - b.data, (a, b), lambda g: (g, -g.sum(axis=axes)))
    raise _shape_error("sub", a.shape, b.shape)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        if not np.isscalar(b):
            raise TypeError("mul: right operand must be a Tensor or python scalar")
        c = float(b)
        return make_op("mul_scalar", a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[n, k] @ [k, m]`` or ``[n, k] @ [k]``."""
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 1:
        return make_op("matvec", ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    return make_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape is ``ids.shape + (dim,)``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got shape {table.shape}")
    if ids.dtype.kind not in "iu":
        raise TypeError("gather: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"gather: id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )

    def _backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_op("gather", table.data[ids], (table,), _backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    old = a.shape
    return make_op("reshape", out, (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    gate = (a.data > 0).astype(np.float64)
    return make_op("relu", a.data * gate, (a,), lambda g: (g * gate,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_op("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return make_op("exp", e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input; use log_softmax for log-probabilities")
    x = a.data
    return make_op("log", np.log(x), (a,), lambda g: (g / x,))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise (last axis) log-softmax, max-shifted."""
    out = _log_softmax(a.data)
    p = np.exp(out)
    return make_op("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return make_op("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def kl_divergence(logits: Tensor, ref_log_probs) -> Tensor:
    """Per-row ``KL(softmax(logits) || exp(ref_log_probs))``.

    The reference is a constant. Fused so that the gradient is exactly zero
    when the two distributions agree bitwise.
    """
    ref = np.asarray(ref_log_probs.data if isinstance(ref_log_probs, Tensor) else ref_log_probs,
                     dtype=np.float64)
    if ref.shape != logits.shape:
        raise _shape_error("kl_divergence", logits.shape, ref.shape)
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    diff = logp - ref
    kl = (p * diff).sum(axis=-1)

    def _backward(g):
        return (g[..., None] * p * (diff - kl[..., None]),)

    return make_op("kl_divergence", kl, (logits,), _backward)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        shape = a.shape
        return make_op("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    shape = a.shape
    return make_op("sum_axis", a.data.sum(axis=ax), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over the second-to-last axis of ``x`` keeping positions where ``mask`` is 1.

    ``x`` has shape ``[..., T, D]`` and ``mask`` ``[..., T]``. Rows with an
    all-zero mask pool to zero.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise _shape_error("masked_mean", x.shape, m.shape)
    count = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    w = (m / count)[..., None]
    out = (x.data * w).sum(axis=-2)
    return make_op("masked_mean", out, (x,), lambda g: (np.expand_dims(g, -2) * w,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the drawn mask is kept in the closure for backward."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return make_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


@dataclass
class Tape:
    """Topologically ordered tensors reachable from an output."""

    tensors: list = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in reversed(t.node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    @property
    def nodes(self) -> list:
        return [t.node for t in self.tensors if t.node is not None]


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, ig in zip(t.node.inputs, t.node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = ig if key not in grads else grads[key] + ig


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray
    tol: float

    @property
    def max_error(self) -> float:
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward against central differences at ``point``.

    Relative error per coordinate; where both gradients are below 1e-8 in
    magnitude the absolute difference is used instead.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("grad_check: point must be finite")

    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)

    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    errors = np.where(scale < 1e-8, diff, diff / np.where(scale < 1e-8, 1.0, scale))
    return GradCheckReport(analytic=analytic, numeric=numeric, errors=errors, tol=tol)
