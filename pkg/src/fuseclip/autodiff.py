"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (attention blocks, contrastive losses, the denoiser)
is built from the operations here. Forward values are plain numpy arrays;
each tracked operation records its parents and a vector-Jacobian closure,
and ``Tensor.backward`` replays the tape in reverse topological order,
accumulating gradients additively on every tensor that requires them.

Shapes follow numpy: matmul and attention accept stacked (batched) operands
with broadcasting over leading axes; gradients are reduced back to the
parent shapes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with optional gradient tracking.

    ``requires_grad`` on a leaf marks it trainable; on an interior node it
    means gradient flows through it. ``grad`` is populated by ``backward``
    and holds an array of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate ``grad`` on every tracked ancestor of this scalar."""
        if self.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tracked tensor")
        order = _topological_order(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g

    # Operator sugar; constants are coerced to untracked tensors.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder over the recorded graph; each node appears once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _track(data: Array, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _track(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _track(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g: Array):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _track(data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def vjp(g: Array):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _track(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _track(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    data = a.data**p

    def vjp(g: Array):
        return (g * p * a.data ** (p - 1.0),)

    return _track(data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _track(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _track(data, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _track(data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _track(data, (a,), lambda g: (g * (1.0 - data * data),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite-difference checks are clean."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def vjp(g: Array):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _track(data, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands of rank >= 2, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def vjp(g: Array):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _track(data, (a, b), vjp)


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes."""
    return _track(
        a.data.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),)
    )


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Permute axes; gradient applies the inverse permutation."""
    inverse = np.argsort(axes)
    return _track(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _track(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float64, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(np.float64, copy=True),)

    return _track(data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows sum to one."""
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _track(data, (a,), vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    """Select rows along the leading axis; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError(f"row indices must be a vector, got shape {idx.shape}")
    data = a.data[idx]

    def vjp(g: Array):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _track(data, (a,), vjp)


def diagonal(a: Tensor) -> Tensor:
    """Main diagonal of a square matrix as a vector."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"diagonal requires a square matrix, got {a.shape}")
    data = np.ascontiguousarray(np.diagonal(a.data))

    def vjp(g: Array):
        out = np.zeros_like(a.data)
        np.fill_diagonal(out, g)
        return (out,)

    return _track(data, (a,), vjp)


# ---------------------------------------------------------------------------
# Composite operations
# ---------------------------------------------------------------------------


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis``; the max shift is treated as constant,
    which leaves the gradient (softmax) exact."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a + Tensor(-m)
    return log(tsum(exp(shifted), axis=axis)) + Tensor(np.squeeze(m, axis=axis))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs feature dimension >= 2, got {d}")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    normed = centered * power(var + eps, -0.5)
    return normed * gain + bias


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def l2_normalize_rows(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row of the last axis to unit L2 norm."""
    sq = tsum(x * x, axis=-1, keepdims=True)
    return x * power(sq + eps, -0.5)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    key_mask: Array | None = None,
    query_mask: Array | None = None,
) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with optional padding masks.

    ``key_mask`` (1 keep, 0 drop, shape broadcastable to (..., L_k)) removes
    keys before the softmax; ``query_mask`` (shape (..., L_q)) zeroes the
    output rows of dropped queries. Masks are constants, not differentiated.
    """
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise ContractError("attention requires non-empty query and key sets")
    if q.shape[-1] != k.shape[-1]:
        raise ContractError(
            f"attention widths disagree: q {q.shape} vs k {k.shape}"
        )
    d = q.shape[-1]
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(d))
    if key_mask is not None:
        penalty = (1.0 - np.asarray(key_mask, dtype=np.float64)) * 1e9
        scores = scores + Tensor(-penalty[..., None, :])
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    if query_mask is not None:
        out = out * Tensor(np.asarray(query_mask, dtype=np.float64)[..., None])
    return out


def sinusoidal_positions(length: int, width: int, scale: float = 1.0) -> Array:
    """Fixed sine/cosine position table of shape (length, width)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(width, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (i // 2) / width)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return scale * table


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
