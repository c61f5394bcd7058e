"""Differentiable operations over :class:`Tensor`.

Feature maps use the (batch, channel, depth, height, width) layout.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, ShapeError, UninitializedStatsError
from .kernels import get_backend
from .tensor import Tensor, make_node


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_node(out, (a, b), back, "div")


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return make_node(x.data * f, (x,), lambda g: (g * f,), "scale")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    e = float(exponent)
    if e == 2.0:
        return make_node(xd * xd, (x,), lambda g: (g * 2 * xd,), "square")
    return make_node(xd ** e, (x,), lambda g: (g * e * xd ** (e - 1),), "power")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"slope must lie in (0, 1), got {slope}")
    s = x.dtype.type(slope)
    xd = x.data
    out = xd * s
    np.maximum(out, xd, out=out)  # equals the branch form because 0 < slope < 1

    def back(g):
        factor = (xd > 0).astype(xd.dtype)
        factor *= 1 - s
        factor += s
        factor *= g
        return (factor,)

    return make_node(out, (x,), back, "leaky_relu")


# reductions and reshaping -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        gx = np.zeros(src_shape, dtype=dtype)
        gx[index] += g
        return (gx,)

    return make_node(np.array(x.data[index]), (x,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate {ref} with {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def crop_slices(src: Sequence[int], target: Sequence[int]) -> tuple:
    """Centered window of extent ``target`` inside ``src``; odd margins put the extra voxel high."""
    out = []
    for s, t in zip(src, target):
        if t > s:
            raise DimensionError(f"crop target {tuple(target)} exceeds source {tuple(src)}")
        lo = (s - t) // 2
        out.append(slice(lo, lo + t))
    return tuple(out)


def center_crop(x: Tensor, target: Sequence[int]) -> Tensor:
    """Crop the trailing spatial axes of ``x`` to ``target`` around the center."""
    target = tuple(int(t) for t in target)
    nsp = len(target)
    sl = (slice(None),) * (x.ndim - nsp) + crop_slices(x.shape[-nsp:], target)
    if x.shape[-nsp:] == target:
        return x
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        gx = np.zeros(src_shape, dtype=dtype)
        gx[sl] = g
        return (gx,)

    return make_node(np.ascontiguousarray(x.data[sl]), (x,), back, "center_crop")


# network layers -----------------------------------------------------------

def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 3D cross-correlation."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and kernel, got {x.shape} and {weight.shape}")
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ShapeError(f"kernel must be cubic, got {weight.shape[2:]}")
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    if min(x.shape[2:]) < k:
        raise DimensionError(f"spatial extents {x.shape[2:]} smaller than kernel {k}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    kern = get_backend()
    xd, wd = x.data, weight.data
    out = kern.conv3d(xd, wd, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def back(g):
        return kern.conv3d_grads(g, xd, wd, stride, x.requires_grad, weight.requires_grad,
                                 bias is not None and bias.requires_grad)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_node(out, parents, back, "conv3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 2:
        raise ContractError(f"upsampling factor must be >= 2, got {factor}")
    N, C, D, H, W = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (N, C, D, f, H, f, W, f))
    out = out.reshape(N, C, D * f, H * f, W * f)

    def back(g):
        return (g.reshape(N, C, D, f, H, f, W, f).sum(axis=(3, 5, 7)),)

    return make_node(out, (x,), back, "upsample_nearest")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.initialized = False


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    Training uses batch statistics (biased variance) and updates the running
    averages as ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    axes = (0, 2, 3, 4)
    bshape = (1, C, 1, 1, 1)
    xd = x.data
    eps = xd.dtype.type(state.eps)
    gd = gamma.data.reshape(bshape)

    if not training:
        if not state.initialized:
            raise UninitializedStatsError("batch norm eval mode needs recorded running statistics")
        inv = 1.0 / np.sqrt(state.var.astype(xd.dtype) + eps)
        xhat = (xd - state.mean.astype(xd.dtype).reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gd + beta.data.reshape(bshape)

        def back_eval(g):
            gx = g * (gd * inv.reshape(bshape))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(out, (x, gamma, beta), back_eval, "batch_norm")

    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + beta.data.reshape(bshape)
    m = state.momentum
    if state.initialized:
        state.mean = (m * state.mean + (1 - m) * mu.reshape(C)).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var.reshape(C)).astype(state.var.dtype)
    else:
        state.mean = mu.reshape(C).astype(state.mean.dtype)
        state.var = var.reshape(C).astype(state.var.dtype)
        state.initialized = True

    def back(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        count = xd.size // C
        gx = g * gd
        s1 = gx.sum(axis=axes, keepdims=True)
        s2 = dgamma.reshape(bshape) * gd
        gx *= count
        gx -= s1
        gx -= xhat * s2
        gx *= inv / count
        return gx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), back, "batch_norm")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), back, "softmax")
