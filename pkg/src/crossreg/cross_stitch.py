"""Cross-stitch units: learnable per-filter 2x2 mixing of two task paths.

For filter ``k`` the unit holds ``[[a_ss, a_sr], [a_rs, a_rr]]`` and returns

    xs' = a_ss * xs + a_sr * xr
    xr' = a_rs * xs + a_rr * xr
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .errors import ContractError, ShapeError


def init_alpha(K: int, seed, mean: float = 0.5, std: float = 0.25, low: float = 0.0, high: float = 1.0,
               dtype=np.float32) -> np.ndarray:
    """Draw a (K, 2, 2) block from a normal truncated to [low, high] by rejection."""
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = K * 4
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        draw = rng.normal(mean, std, size=2 * (n - filled) + 8)
        keep = draw[(draw >= low) & (draw <= high)][: n - filled]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out.reshape(K, 2, 2).astype(dtype)


def identity_alpha(K: int, dtype=np.float32) -> np.ndarray:
    return np.tile(np.eye(2, dtype=dtype), (K, 1, 1))


class CrossStitchUnit:
    """Holds the trainable ``alpha`` tensor for one layer of K filter pairs."""

    def __init__(self, alpha: Tensor, name: str = ""):
        if alpha.ndim != 3 or alpha.shape[1:] != (2, 2):
            raise ShapeError(f"alpha must be (K, 2, 2), got {alpha.shape}")
        self.alpha = alpha
        self.name = name

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    def __call__(self, xs: Tensor, xr: Tensor):
        return apply(self, xs, xr)


def apply(unit: CrossStitchUnit, xs: Tensor, xr: Tensor):
    """Mix the segmentation-path and registration-path maps; returns (xs', xr')."""
    if xs.shape != xr.shape:
        raise ShapeError(f"paths disagree: {xs.shape} vs {xr.shape}")
    K = unit.channels
    if xs.shape[1] != K:
        raise ShapeError(f"unit has {K} filters, maps have {xs.shape[1]} channels")
    bshape = (1, K) + (1,) * (xs.ndim - 2)
    a = ops.reshape(unit.alpha, (K, 4))

    def coef(j):
        return ops.reshape(a[:, j], bshape)

    xs_new = coef(0) * xs + coef(1) * xr
    xr_new = coef(2) * xs + coef(3) * xr
    return xs_new, xr_new
