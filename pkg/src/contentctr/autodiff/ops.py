"""Differentiable primitives.

Each function accepts Tensors (or anything numpy can coerce) and returns a
new Tensor; inputs are never mutated.
"""

from __future__ import annotations

import numpy as np

from .tensor import DegenerateRowError, DimensionError, RankError, Tensor, constant, record_op

__all__ = [
    "add", "sub", "mul", "div", "neg", "scale", "matmul",
    "exp", "log", "sqrt", "tanh", "sigmoid", "softplus", "gelu", "relu", "clip",
    "sum", "mean", "reshape", "transpose", "broadcast_to", "concat", "stack",
    "getitem", "take", "softmax", "logsumexp", "where_mask", "unbroadcast",
]


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- arithmetic ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(
        ad * bd, (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return record_op(
        out, (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = constant(a)
    return record_op(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = constant(a)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (rank >= 2 on both sides)."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return record_op(ad @ bd, (a, b), backward)


# -- elementwise --------------------------------------------------------

def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = constant(a)
    ad = a.data
    return record_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = constant(a)
    out = np.sqrt(a.data)
    return record_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _sigmoid(a.data)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """``log(1 + e^x)`` evaluated without overflow."""
    a = constant(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return record_op(out, (a,), lambda g: (g * _sigmoid(x),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU; smooth, so finite differences behave."""
    a = constant(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return record_op(out, (a,), backward)


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return record_op(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; clamped entries pass no gradient."""
    a = constant(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return record_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where_mask(a, mask: np.ndarray) -> Tensor:
    """Zero entries where ``mask`` is false; no gradient flows through them."""
    a = constant(a)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(a, Tensor(mask.astype(float)), "where_mask")
    return record_op(np.where(mask, a.data, 0.0), (a,), lambda g: (unbroadcast(np.where(mask, g, 0.0), a.shape),))


# -- reductions and shape ----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return record_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return record_op(out, (a,), lambda g: (unbroadcast(g, old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[x.shape for x in tensors]}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def _check_index(shape, index):
    idx = index if isinstance(index, tuple) else (index,)
    dims = [i for i in idx if i is not None and i is not Ellipsis]
    if len(dims) > len(shape):
        raise DimensionError(f"index {index!r} has too many axes for shape {shape}")
    for ax, i in enumerate(idx):
        if ax >= len(shape) or i is Ellipsis or i is None:
            break
        n = shape[ax]
        if isinstance(i, (int, np.integer)) and not -n <= i < n:
            raise DimensionError(f"index {i} out of range for axis {ax} of size {n}")
        if isinstance(i, slice):
            start, stop, step = i.start, i.stop, i.step
            for v in (start, stop):
                if v is not None and not -n <= v <= n:
                    raise DimensionError(f"slice {i} out of range for axis {ax} of size {n}")


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = constant(a)
    _check_index(a.shape, index)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"index {index!r} invalid for shape {a.shape}: {exc}") from None
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return record_op(np.array(out, dtype=np.float64), (a,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (embedding lookup)."""
    a = constant(a)
    indices = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise DimensionError(f"take: index out of range for axis of size {n}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return record_op(np.take(a.data, indices, axis=axis), (a,), backward)


# -- normalizers --------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; ``-inf`` inputs map to exactly zero."""
    a = constant(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateRowError("softmax row with every entry equal to -inf")
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = constant(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    w = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return record_op(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)
