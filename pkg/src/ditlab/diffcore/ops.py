"""Differentiable primitives.

Each function computes the forward value with numpy and registers a closure
that maps the output gradient back to input gradients.  The set is exactly
what the transformer, the diffusion losses, and the tests need; anything
fancier is composed from these.

Numerically sensitive kernels (softmax, layer norm, silu) use the standard
stabilized forms so that debug finiteness checks stay quiet on well-scaled
inputs.

A note on determinism: matmul with stacked leading dimensions (e.g.
[B,T,d] @ [d,n] or [B,h,T,k] @ [B,h,k,T]) is evaluated by numpy slice by
slice, so each sample's result is bitwise independent of the batch size.
Plain 2-D matmul with the batch folded into rows does NOT have this property
on BLAS backends.  Model code therefore keeps the batch axis stacked and
never flattens it into GEMM rows.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ditlab.diffcore.tensor import Tensor, make_result
from ditlab.errors import ShapeError


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _sum_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reverse numpy broadcasting: reduce grad down to the given shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return make_result(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return make_result(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return make_result(out, "mul", (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (kept separate so dtype never changes)."""
    a = as_tensor(a)
    if not np.issubdtype(a.dtype, np.floating):
        raise TypeError(f"scale needs a float tensor, got {a.dtype}")
    c = float(c)
    out = a.data * a.dtype.type(c)

    def vjp(g):
        return (g * a.dtype.type(c),)

    return make_result(out, "scale", (a,), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product with stacked leading dimensions.

    Supported: 2D @ 2D, ND @ 2D (shared right operand), and ND @ ND with
    equal leading dimensions.  See the module docstring for why model code
    prefers the stacked forms.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2+ dims, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul leading dimensions disagree: {a.shape} @ {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        ga = _sum_to(ga, a.shape)
        if b.ndim == 2 and a.ndim > 2:
            # fold the stacked dims once for the weight gradient
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            gb = _sum_to(gb, b.shape)
        return ga, gb

    return make_result(out, "matmul", (a, b), vjp)


# -- elementwise nonlinearities ----------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return make_result(out, "exp", (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return make_result(out, "log", (a,), vjp)


def absolute(a) -> Tensor:
    """|x|, with the subgradient at 0 taken as 0."""
    a = as_tensor(a)
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return make_result(out, "abs", (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form: the exponent is always <= 0, so no overflow
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return make_result(out, "silu", (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_tanh(a) -> Tensor:
    """Tanh approximation of GELU: 0.5x(1 + tanh(c(x + 0.044715x^3)))."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(_GELU_A)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = x.dtype.type(0.5) * x * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d.astype(x.dtype, copy=False),)

    return make_result(out, "gelu_tanh", (a,), vjp)


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, "softmax_lastdim", (a,), vjp)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance.  No affine part;
    scale and shift, when wanted, are separate mul/add ops."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        proj = (g * out).mean(axis=-1, keepdims=True)
        return ((g - gm - out * proj) * inv,)

    return make_result(out, "layer_norm", (a,), vjp)


# -- shape manipulation -------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(in_shape),)

    return make_result(out, "reshape", (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_result(out, "transpose", (a,), vjp)


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(np.ascontiguousarray(g[tuple(index)]))
        return tuple(pieces)

    return make_result(out, "concat", tuple(tensors), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_result(out, "narrow", (a,), vjp)


def split(a, axis: int, sizes: Sequence[int]) -> list:
    """Split into consecutive chunks of the given sizes along an axis."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(
            f"split sizes {list(sizes)} do not cover axis {axis} of shape {a.shape}"
        )
    pieces = []
    start = 0
    for n in sizes:
        pieces.append(narrow(a, axis, start, n))
        start += n
    return pieces


# -- reductions ---------------------------------------------------------


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).copy(),)

    return make_result(out, "mean", (a,), vjp)


# -- lookup -------------------------------------------------------------


def embedding(table, indices) -> Tensor:
    """Row lookup: out[i] = table[indices[i]].  Gradients scatter-add, so
    repeated indices accumulate."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"embedding indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_result(out, "embedding", (table,), vjp)


def stop_gradient(a) -> Tensor:
    """Pass the value through, block the gradient."""
    return as_tensor(a).detach()
