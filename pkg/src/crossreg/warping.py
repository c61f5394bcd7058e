"""Spatial transformer: displacement-field warping and multi-resolution targets.

A DVF is a ``(N, 3, D, H, W)`` array of displacements in voxels, channel
order ``(dz, dy, dx)``.  The output voxel at integer position ``p`` reads the
moving volume at ``origin + p + dvf[p]``.  ``origin`` lets the DVF grid sit
inside a larger moving volume (the network's output windows are centered in
the input patch); it defaults to zero, in which case shapes must match.
Samples falling outside the moving volume are clamped to its border.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor
from .autodiff.ops import crop_slices
from .autodiff.tensor import make_node
from .errors import DimensionError, ShapeError


def output_sizes(n: int) -> dict:
    """Head output extents for a cubic input patch of extent ``n``."""
    return {"high": n - 40, "mid": n // 2 - 18, "low": n // 4 - 7}


def _check(moving_shape, dvf_shape, origin):
    if len(dvf_shape) != 5 or dvf_shape[1] != 3:
        raise ShapeError(f"DVF must be (N, 3, D, H, W), got {dvf_shape}")
    if len(moving_shape) != 5 or moving_shape[0] != dvf_shape[0]:
        raise ShapeError(f"moving {moving_shape} and DVF {dvf_shape} disagree on batch layout")
    if origin is None:
        if tuple(moving_shape[2:]) != tuple(dvf_shape[2:]):
            raise ShapeError(f"moving spatial shape {moving_shape[2:]} != DVF {dvf_shape[2:]}")
        return (0, 0, 0)
    return tuple(origin)


def _axis_coords(dvf, origin, moving_sp):
    """Per-axis (i0, i1, frac, inside) for the sampling positions."""
    N, _, D, H, W = dvf.shape
    grids = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    out = []
    for ax in range(3):
        m = moving_sp[ax]
        c = dvf[:, ax] + (grids[ax] + origin[ax]).astype(dvf.dtype)
        inside = (c >= 0) & (c <= m - 1)
        cc = np.clip(c, 0, m - 1)
        i0 = np.clip(np.floor(cc).astype(np.int64), 0, max(m - 2, 0))
        frac = cc - i0
        i1 = np.minimum(i0 + 1, m - 1)
        out.append((i0, i1, frac, inside))
    return out


def _corners(axes, moving_sp):
    """Yield (flat index, weight, per-axis weights, bits) for the 8 corners."""
    (z0, z1, fz, _), (y0, y1, fy, _), (x0, x1, fx, _) = axes
    Hm, Wm = moving_sp[1], moving_sp[2]
    wz = (1 - fz, fz)
    wy = (1 - fy, fy)
    wx = (1 - fx, fx)
    iz, iy, ix = (z0, z1), (y0, y1), (x0, x1)
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                flat = (iz[bz] * Hm + iy[by]) * Wm + ix[bx]
                yield flat, wz[bz] * wy[by] * wx[bx], (wz[bz], wy[by], wx[bx]), (bz, by, bx)


def _gather(mov_flat, flat):
    N, C, _ = mov_flat.shape
    idx = flat.reshape(N, 1, -1)
    return np.take_along_axis(mov_flat, np.broadcast_to(idx, (N, C, idx.shape[2])), axis=2)


def warp_trilinear(moving, dvf, origin: Optional[Sequence[int]] = None) -> Tensor:
    """Differentiable trilinear resampling of ``moving`` through ``dvf``."""
    moving = as_tensor(moving)
    dvf = as_tensor(dvf)
    origin = _check(moving.shape, dvf.shape, origin)
    md, dd = moving.data, dvf.data.astype(moving.dtype, copy=False)
    N, C = md.shape[:2]
    msp = md.shape[2:]
    osp = dd.shape[2:]
    V = int(np.prod(osp))
    mov_flat = md.reshape(N, C, -1)
    axes = _axis_coords(dd, origin, msp)
    corners = list(_corners(axes, msp))

    out = np.zeros((N, C, V), dtype=md.dtype)
    for flat, w, _, _ in corners:
        out += w.reshape(N, 1, V) * _gather(mov_flat, flat)
    out = out.reshape((N, C) + tuple(osp))

    def back(g):
        g = g.reshape(N, C, V)
        gm = None
        if moving.requires_grad:
            M = mov_flat.shape[2]
            base = (np.arange(N * C).reshape(N, C, 1) * M)
            acc = np.zeros(N * C * M, dtype=np.float64)
            for flat, w, _, _ in corners:
                idx = base + flat.reshape(N, 1, V)
                acc += np.bincount(idx.reshape(-1), weights=(g * w.reshape(N, 1, V)).reshape(-1),
                                   minlength=N * C * M)
            gm = acc.astype(md.dtype).reshape(md.shape)
        gd = None
        if dvf.requires_grad:
            gd = np.zeros((N, 3, V), dtype=md.dtype)
            for flat, _, ws, bits in corners:
                vals = (g * _gather(mov_flat, flat)).sum(axis=1)
                for ax in range(3):
                    others = [ws[j] for j in range(3) if j != ax]
                    sign = 1.0 if bits[ax] else -1.0
                    gd[:, ax] += sign * (others[0] * others[1]).reshape(N, V) * vals
            for ax in range(3):
                gd[:, ax] *= axes[ax][3].reshape(N, V)
            gd = gd.reshape(dvf.shape).astype(dvf.dtype, copy=False)
        return gm, gd

    return make_node(out, (moving, dvf), back, "warp_trilinear")


def warp_labels(seg: np.ndarray, dvf: np.ndarray, origin: Optional[Sequence[int]] = None) -> np.ndarray:
    """Nearest-neighbor label resampling.  Accepts (D,H,W)+(3,D,H,W) or batched arrays."""
    seg = np.asarray(seg)
    dvf = np.asarray(dvf)
    single = seg.ndim == 3
    if single:
        seg, dvf = seg[None], dvf[None]
    if dvf.ndim != 5 or dvf.shape[1] != 3 or seg.ndim != 4:
        raise ShapeError(f"bad label/DVF shapes {seg.shape} / {dvf.shape}")
    origin = _check((seg.shape[0], 1) + seg.shape[1:], dvf.shape, origin)
    N, _, D, H, W = dvf.shape
    msp = seg.shape[1:]
    grids = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    idx = []
    for ax in range(3):
        c = dvf[:, ax] + grids[ax] + origin[ax]
        idx.append(np.clip(np.floor(c + 0.5).astype(np.int64), 0, msp[ax] - 1))
    n = np.arange(N).reshape(N, 1, 1, 1)
    out = seg[n, idx[0], idx[1], idx[2]]
    return out[0] if single else out


def warp_volume(volume: np.ndarray, dvf: np.ndarray) -> np.ndarray:
    """Trilinear warp of a plain (D,H,W) volume with a (3,D,H,W) DVF."""
    out = warp_trilinear(Tensor(np.asarray(volume)[None, None]), Tensor(np.asarray(dvf)[None]))
    return out.data[0, 0]


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping average pooling over the trailing three axes."""
    if factor == 1:
        return x
    *lead, D, H, W = x.shape
    if D % factor or H % factor or W % factor:
        raise DimensionError(f"extents {(D, H, W)} not divisible by {factor}")
    f = factor
    r = x.reshape(*lead, D // f, f, H // f, f, W // f, f)
    nl = len(lead)
    return r.mean(axis=(nl + 1, nl + 3, nl + 5))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(..., D, H, W) integer labels -> (..., C, D, H, W) one-hot."""
    labels = np.asarray(labels)
    oh = (labels[..., None, :, :, :] == np.arange(num_classes).reshape((num_classes, 1, 1, 1))).astype(dtype)
    return oh


RESOLUTIONS = ("high", "mid", "low")
POOL = {"high": 1, "mid": 2, "low": 4}


def make_multires_targets(fixed, fixed_seg_onehot, moving, moving_seg_onehot) -> dict:
    """Per-resolution targets for deep supervision.

    Inputs are full patches ``(N, C, n, n, n)``.  For each resolution the
    fixed-side arrays are pooled and center-cropped to the head's output
    window; the moving-side arrays are pooled but kept whole, with
    ``origin`` locating the output window inside them for warping.
    """
    n = fixed.shape[-1]
    if fixed.shape[-3:] != (n, n, n) or n % 4:
        raise DimensionError(f"patch must be cubic with extent divisible by 4, got {fixed.shape[-3:]}")
    sizes = output_sizes(n)
    if min(sizes.values()) < 1:
        raise DimensionError(f"patch extent {n} too small; need n >= 44")
    bundle = {}
    for res in RESOLUTIONS:
        f = POOL[res]
        t = sizes[res]
        pf = avg_pool(fixed, f)
        psf = avg_pool(fixed_seg_onehot, f)
        sl = crop_slices(pf.shape[-3:], (t, t, t))
        full = (slice(None), slice(None)) + sl
        bundle[res] = {
            "fixed": np.ascontiguousarray(pf[full]),
            "fixed_seg": np.ascontiguousarray(psf[full]),
            "moving": avg_pool(moving, f),
            "moving_seg": avg_pool(moving_seg_onehot, f),
            "origin": tuple(s.start for s in sl),
            "size": t,
        }
    return bundle
