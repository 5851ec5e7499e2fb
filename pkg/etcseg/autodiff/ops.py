"""Elementwise, reduction and shape ops with their backward rules.

Elementwise binary ops accept equal shapes or a scalar on either side; any
other broadcast must be spelled out with :func:`broadcast_to`.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from etcseg.autodiff.tensor import DTYPE, Tensor, TensorLike, as_tensor, make_result
from etcseg.errors import DimensionError, DomainError

Axis = Optional[Union[int, Tuple[int, ...]]]


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _check_binary(op_name: str, a: Tensor, b: Tensor):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}",
                         {'op': op_name, 'a': list(a.shape), 'b': list(b.shape)})


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    """Sum a broadcast gradient back down to a scalar operand's shape"""
    if grad.shape == target.shape:
        return grad
    return np.full(target.shape, grad.sum(), dtype=DTYPE)


# -- elementwise binary -------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary('add', a, b)

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_result(a.data + b.data, (a, b), backward, 'add')


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary('sub', a, b)

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return make_result(a.data - b.data, (a, b), backward, 'sub')


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary('mul', a, b)

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return make_result(a.data * b.data, (a, b), backward, 'mul')


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary('div', a, b)
    if np.any(b.data == 0):
        raise DomainError("div: divisor contains zero", {'op': 'div'})
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)

    return make_result(out, (a, b), backward, 'div')


def pow(a: TensorLike, exponent: TensorLike) -> Tensor:
    a, p = as_tensor(a), as_tensor(exponent)
    _check_binary('pow', a, p)
    if p.requires_grad and np.any(a.data <= 0):
        raise DomainError("pow: tensor exponent needs a positive base", {'op': 'pow'})
    out = np.power(a.data, p.data)

    def backward(g):
        grad_a = g * p.data * np.power(a.data, p.data - 1.0)
        grad_p = None
        if p.requires_grad:
            grad_p = _reduce_to(g * out * np.log(a.data), p)
        return _reduce_to(grad_a, a), grad_p

    return make_result(out, (a, p), backward, 'pow')


# -- elementwise unary ----------------------------------------------------------

def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument contains non-positive values", {'op': 'log'})

    def backward(g):
        return (g / a.data,)

    return make_result(np.log(a.data), (a,), backward, 'log')


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return make_result(out, (a,), backward, 'exp')


def softplus_values(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x) without overflow: x + ln(1 + e^-x) on the positive side"""
    x = np.asarray(x, dtype=DTYPE)
    positive = x > 0
    out = np.empty_like(x)
    out[positive] = x[positive] + np.log1p(np.exp(-x[positive]))
    out[~positive] = np.log1p(np.exp(x[~positive]))
    return out


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    positive = x > 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * sigmoid_values(a.data),)

    return make_result(softplus_values(a.data), (a,), backward, 'softplus')


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, a.data, 0.0), (a,), backward, 'relu')


def neg(a: TensorLike) -> Tensor:
    return mul(a, -1.0)


# -- reductions ----------------------------------------------------------------------

def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: TensorLike, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward, 'sum')


def mean(a: TensorLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def norm(a: TensorLike, axis: int) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at a zero vector is 0"""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def backward(g):
        expanded = np.expand_dims(out, axis)
        safe = np.where(expanded > 0, expanded, 1.0)
        scale = np.where(expanded > 0, 1.0 / safe, 0.0)
        return (np.expand_dims(g, axis) * a.data * scale,)

    return make_result(out, (a,), backward, 'norm')


# -- shape ops -------------------------------------------------------------------------

def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return make_result(out, (a,), backward, 'reshape')


def broadcast_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise DimensionError(f"broadcast_to: rank mismatch {a.shape} -> {shape}")
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    expanded = tuple(i for i, (src, dst) in enumerate(zip(a.shape, shape)) if src != dst)

    def backward(g):
        return (g.sum(axis=expanded, keepdims=True) if expanded else g,)

    return make_result(out, (a,), backward, 'broadcast_to')


def expand_along(a: TensorLike, axis: int, size: int) -> Tensor:
    """Insert ``axis`` and repeat ``a`` ``size`` times along it"""
    a = as_tensor(a)
    kept = list(a.shape)
    axis = axis % (a.ndim + 1)
    kept.insert(axis, 1)
    target = list(kept)
    target[axis] = size
    return broadcast_to(reshape(a, kept), target)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, 'concat')


def select(a: TensorLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``"""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return make_result(out, (a,), backward, 'select')


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)
