"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a backward closure on the output
tensor; the recorded graph is the tape.  ``backward`` walks it in reverse
topological order and accumulates gradients into every tensor that
requires them.

Broadcasting is deliberately narrow.  Two shapes are compatible when they
are equal, when one is a scalar, when the shorter is a suffix of the longer
(leading batch dimensions), or when both have the same rank and differ only
where one side has an explicit size-1 axis.  Anything else raises
``DimensionError``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "softmax_lastdim",
    "concat",
    "stack",
    "take",
    "reshape",
    "transpose_last2",
    "reduce_sum",
    "reduce_mean",
    "affine",
    "bce_with_logits",
    "backward",
    "gradient_check",
]


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) != len(b):
        short, long_ = (a, b) if len(a) < len(b) else (b, a)
        if long_[len(long_) - len(short):] == short:
            return long_
        raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str = "") -> "Tensor":
        """Build an op output.

        ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
        parent, each with the parent's shape or broadcastable to it.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out._op = op
        live = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in live)
        if out.requires_grad:
            out._parents = live

            def _bw(g, _parents=live, _fn=backward_fn):
                grads = _fn(g)
                for p, pg in zip(_parents, grads):
                    if pg is None or not p.requires_grad:
                        continue
                    pg = _unbroadcast(np.asarray(pg, dtype=np.float64), p.data.shape)
                    if p.grad is None:
                        p.grad = pg.copy()
                    else:
                        p.grad += pg

            out._backward = _bw
        else:
            out._parents = ()
            out._backward = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self._op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor.from_op(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor.from_op(np.log(d), (x,), lambda g: (g / d,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    e = np.exp(-np.abs(d))
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(out, (x,), lambda g: (g * sig,), "softplus")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    if x.ndim == 0 or x.size == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: empty or scalar input of shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), _bw, "softmax")


# -- linear algebra and structure ---------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def _bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor.from_op(ad @ bd, (a, b), _bw, "matmul")


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2: need at least 2-D input, got {x.shape}")
    return Tensor.from_op(
        np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose"
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no tensors given")
    ax = _norm_axis(axis, ts[0].ndim, "concat")
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor.from_op(np.concatenate([t.data for t in ts], axis=ax), ts, _bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    if not ts:
        raise DimensionError("stack: no tensors given")
    if any(t.shape != ts[0].shape for t in ts):
        raise DimensionError(f"stack: shapes differ: {[t.shape for t in ts]}")
    ax = _norm_axis(axis, ts[0].ndim + 1, "stack")

    def _bw(g):
        return tuple(np.moveaxis(g, ax, 0))

    return Tensor.from_op(np.stack([t.data for t in ts], axis=ax), ts, _bw, "stack")


def take(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    ax = _norm_axis(axis, x.ndim, "take")
    n = x.shape[ax]
    if not -n <= index < n:
        raise DimensionError(f"take: index {index} out of range for axis of size {n}")
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return Tensor.from_op(np.take(x.data, index, axis=ax), (x,), _bw, "take")


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        return Tensor.from_op(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape),), "sum")
    ax = _norm_axis(axis, x.ndim, "reduce_sum")

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return Tensor.from_op(x.data.sum(axis=ax, keepdims=keepdims), (x,), _bw, "sum")


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim, "reduce_mean")]
    if n == 0:
        raise DimensionError(f"reduce_mean: empty reduction over shape {x.shape}")
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ W + b with W shaped (in_dim, out_dim)."""
    out = matmul(x, W) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), W), (W.shape[-1],))
    return out if b is None else add(out, b)


# -- losses ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.

    ``weights`` (same shape, optional) scales each element's term before the mean.
    """
    z = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64)
    sp = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    terms = w * (sp - y * z)
    n = z.size
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(terms.sum() / n, (logits,), lambda g: (g * w * (sig - y) / n,), "bce")


# -- reverse pass ---------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaf gradients add onto whatever is already stored, so a tensor used by
    several consumers (or several backward calls) sums their contributions.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradient_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-4,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    The error per entry is |analytic - numeric| / max(1, |numeric|).  ``f``
    is re-evaluated with each parameter entry nudged by +/-epsilon.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ContractError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("gradient_check: f returned a non-finite value")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def _value() -> float:
        v = f().data
        if not np.all(np.isfinite(v)):
            raise EvaluationError("gradient_check: f returned a non-finite value")
        return float(v.reshape(-1)[0])

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        agf = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _value()
            flat[i] = orig - epsilon
            down = _value()
            flat[i] = orig
            num = (up - down) / (2.0 * epsilon)
            err = abs(agf[i] - num) / max(1.0, abs(num))
            if not math.isfinite(err):
                raise EvaluationError("gradient_check: non-finite gradient")
            worst = max(worst, err)
    return worst
