"""Differentiable primitives.

Spatial ops take a single image in height x width x channels layout; batches
are handled by the caller as an outer loop.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, as_tensor, make_result

SIGMOID_EPS = 1e-7


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), back, "mul")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return make_result(out, (a,), lambda g: (2.0 * a.data * g,), "square")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, a)``. The subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function clamped to ``[1e-7, 1 - 1e-7]``.

    Clamped entries receive zero gradient, so downstream logarithms stay finite.
    """
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    clipped = np.clip(s, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    live = clipped == s

    def back(g):
        return (g * s * (1.0 - s) * live,)

    return make_result(clipped, (a,), back, "sigmoid")


# reductions and structure -----------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return mul(sum(a), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the backward scatters with ``np.add.at``."""
    out = np.array(a.data[index], copy=True)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (a,), back, "getitem")


def pad_spatial(a: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return a
    out = np.pad(a.data, ((pad, pad), (pad, pad), (0, 0)))

    def back(g):
        return (g[pad:-pad, pad:-pad, :],)

    return make_result(out, (a,), back, "pad")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; ``mask`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def back(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return make_result(out, (a, b), back, "where")


# network layers ----------------------------------------------------------------

def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an ``(H, W, Cin)`` image.

    ``kernels`` has shape ``(kh, kw, Cin, Cout)`` and ``bias`` has shape ``(Cout,)``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects (H, W, C) input and (kh, kw, Cin, Cout) kernels, got {x.shape} and {kernels.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernels expect {kcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    # (Ho, Wo, C, kh, kw) -> (Ho*Wo, kh*kw*C), matching kernels' (kh, kw, Cin) order
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    kmat = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(ho, wo, cout)

    def back(g):
        g2 = g.reshape(ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, i, j, :]
            gx = gxp[padding : padding + h, padding : padding + w, :] if padding else gxp
        return gx, gk, gb

    return make_result(out, (x, kernels, bias), back, "conv2d")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of the flattened input; ``weight`` has shape ``(out, in)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    flat = x.data.reshape(-1)
    if weight.ndim != 2 or weight.shape[1] != flat.size:
        raise DimensionError(f"fully_connected: input length {flat.size} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    out = weight.data @ flat + bias.data
    in_shape = x.shape

    def back(g):
        gx = (weight.data.T @ g).reshape(in_shape) if x.requires_grad else None
        gw = np.outer(g, flat) if weight.requires_grad else None
        return gx, gw, g

    return make_result(out, (x, weight, bias), back, "fully_connected")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double both spatial extents by replicating each value into a 2x2 block."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"upsample_nearest2 expects (H, W, C), got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w, c = x.shape

    def back(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return make_result(out, (x,), back, "upsample_nearest2")


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties go to the first element in row-major order."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"maxpool2 expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4, c)
    arg = blocks.argmax(axis=2)  # argmax returns the first maximum
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def back(g):
        gb = np.zeros((h // 2, w // 2, 4, c))
        np.put_along_axis(gb, arg[:, :, None, :], g[:, :, None, :], axis=2)
        return (gb.reshape(h // 2, w // 2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c),)

    return make_result(out, (x,), back, "maxpool2")


def avgpool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25,)

    return make_result(out, (x,), back, "avgpool2")
