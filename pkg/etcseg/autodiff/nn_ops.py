"""NCHW layer ops: convolution, transposed convolution, upsampling, pooling.

Convolutions go through an im2col layout of shape (B, C, kh, kw, Ho, Wo)
and a single einsum; col2im scatters back with strided slice adds.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from etcseg.autodiff.tensor import DTYPE, Tensor, TensorLike, as_tensor, make_result
from etcseg.errors import DimensionError


def _require_nchw(op_name: str, x: Tensor):
    if x.ndim != 4:
        raise DimensionError(f"{op_name}: expected NCHW input, got shape {x.shape}", {'op': op_name})


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols: np.ndarray, out_shape: Tuple[int, ...], stride: int) -> np.ndarray:
    _, _, kh, kw, ho, wo = cols.shape
    out = np.zeros(out_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def conv2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; weight is (C_out, C_in, kh, kw), bias is (C_out,)"""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_nchw('conv2d', x)
    if weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    b, _, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = _im2col(_pad(x.data, padding), kh, kw, stride, ho, wo)
    out = np.einsum('bcijhw,ocij->bohw', cols, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data.reshape(1, c_out, 1, 1)
        parents.append(bias)

    def backward(g):
        grad_w = np.einsum('bohw,bcijhw->ocij', g, cols, optimize=True)
        grad_cols = np.einsum('bohw,ocij->bcijhw', g, weight.data, optimize=True)
        grad_x = _unpad(_col2im(grad_cols, (b, x.shape[1], hp, wp), stride), padding)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward, 'conv2d')


def transposed_conv2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None,
                      stride: int = 2, padding: int = 0) -> Tensor:
    """Adjoint of conv2d; weight is (C_in, C_out, kh, kw)"""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_nchw('transposed_conv2d', x)
    if weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"transposed_conv2d: weight {weight.shape} incompatible with input {x.shape}")
    b, _, h, w = x.shape
    _, c_out, kh, kw = weight.shape
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hp - 2 * padding <= 0 or wp - 2 * padding <= 0:
        raise DimensionError(f"transposed_conv2d: padding {padding} too large for output {hp}x{wp}")

    cols = np.einsum('bchw,coij->boijhw', x.data, weight.data, optimize=True)
    out = _unpad(_col2im(cols, (b, c_out, hp, wp), stride), padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"transposed_conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data.reshape(1, c_out, 1, 1)
        parents.append(bias)

    def backward(g):
        g_cols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        grad_x = np.einsum('boijhw,coij->bchw', g_cols, weight.data, optimize=True)
        grad_w = np.einsum('bchw,boijhw->coij', x.data, g_cols, optimize=True)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward, 'transposed_conv2d')


def nearest_upsample(x: TensorLike, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    _require_nchw('nearest_upsample', x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, 'nearest_upsample')


def bilinear_matrix(size: int, factor: int) -> np.ndarray:
    """(size*factor, size) interpolation matrix, half-pixel centres, edge clamped"""
    out_size = size * factor
    centres = (np.arange(out_size, dtype=DTYPE) + 0.5) / factor - 0.5
    centres = np.clip(centres, 0.0, size - 1)
    lower = np.floor(centres).astype(np.int64)
    upper = np.minimum(lower + 1, size - 1)
    frac = centres - lower
    matrix = np.zeros((out_size, size), dtype=DTYPE)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, lower), 1.0 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix


def bilinear_upsample(x: TensorLike, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    _require_nchw('bilinear_upsample', x)
    _, _, h, w = x.shape
    mh, mw = bilinear_matrix(h, factor), bilinear_matrix(w, factor)
    out = np.einsum('ph,bchw,qw->bcpq', mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum('ph,bcpq,qw->bchw', mh, g, mw, optimize=True),)

    return make_result(out, (x,), backward, 'bilinear_upsample')


def maxpool2d(x: TensorLike, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    _require_nchw('maxpool2d', x)
    stride = stride or kernel
    b, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"maxpool2d: kernel {kernel} larger than input {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    cols = _im2col(x.data, kernel, kernel, stride, ho, wo).reshape(b, c, kernel * kernel, ho, wo)
    winner = cols.argmax(axis=2)
    out = np.take_along_axis(cols, winner[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        grad_cols = np.zeros_like(cols)
        np.put_along_axis(grad_cols, winner[:, :, None], g[:, :, None], axis=2)
        grad_cols = grad_cols.reshape(b, c, kernel, kernel, ho, wo)
        return (_col2im(grad_cols, (b, c, h, w), stride),)

    return make_result(out, (x,), backward, 'maxpool2d')
