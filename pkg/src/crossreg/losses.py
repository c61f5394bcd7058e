"""Training losses and their per-variant, multi-resolution composition."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ContractError, DimensionError, ShapeError
from .warping import RESOLUTIONS, warp_trilinear

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
NCC_EPS = 1e-8


@dataclass
class LossWeights:
    w_dice: float = 1.0
    w_ncc: float = 1.0
    w_bend: float = 0.5
    resolution_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    mixed_bending: bool = True

    def __post_init__(self):
        ws = (self.w_dice, self.w_ncc, self.w_bend) + tuple(self.resolution_weights)
        if any(w < 0 for w in ws):
            raise ConfigError("loss weights must be non-negative")
        if len(self.resolution_weights) != 3 or abs(sum(self.resolution_weights) - 1.0) > 1e-9:
            raise ConfigError("resolution weights must be three values summing to 1")


def dice_loss(pred_probs, target_probs, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft Dice over the foreground classes (channel 0 is background).

    Sums run over the batch and all voxels jointly, per class.
    """
    p = as_tensor(pred_probs)
    t = as_tensor(target_probs)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    if p.shape[1] < 2:
        raise ShapeError("Dice loss needs a background and at least one foreground channel")
    axes = (0,) + tuple(range(2, p.ndim))
    inter = ops.sum(p * t, axis=axes)
    denom = ops.sum(p, axis=axes) + ops.sum(t, axis=axes)
    dice = (ops.scale(inter, 2.0) + eps) / (denom + eps)
    return 1.0 - ops.mean(dice[1:])


def ncc_loss(a, b, eps: float = NCC_EPS) -> Tensor:
    """1 - global normalized cross-correlation per sample, averaged over the batch."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"NCC inputs differ: {a.shape} vs {b.shape}")
    if a.size // a.shape[0] < 2:
        raise DimensionError("NCC needs at least two voxels per sample")
    axes = tuple(range(1, a.ndim))
    ac = a - ops.mean(a, axis=axes, keepdims=True)
    bc = b - ops.mean(b, axis=axes, keepdims=True)
    num = ops.sum(ac * bc, axis=axes)
    va = ops.sum(ac * ac, axis=axes)
    vb = ops.sum(bc * bc, axis=axes)
    if log.isEnabledFor(logging.DEBUG) and (np.any(va.data == 0) or np.any(vb.data == 0)):
        log.debug("NCC on a constant input; epsilon keeps the ratio finite")
    ncc = num / ops.sqrt(va * vb + eps)
    return 1.0 - ops.mean(ncc)


def bending_energy(dvf, mixed: bool = True) -> Tensor:
    """Squared second derivatives of the displacement field.

    Derivatives use central differences on interior voxels only; the sum
    over components and interior voxels is divided by the total voxel count
    (batch included), so boundary voxels count as zero.
    """
    u = as_tensor(dvf)
    if u.ndim != 5:
        raise ShapeError(f"DVF must be (N, 3, D, H, W), got {u.shape}")
    if min(u.shape[2:]) < 3:
        raise DimensionError(f"bending energy needs extents >= 3, got {u.shape[2:]}")
    N, C, D, H, W = u.shape
    c = slice(1, -1)
    lo, hi = slice(None, -2), slice(2, None)
    s = slice(None)
    center = u[s, s, c, c, c]
    terms = []
    for ax in range(3):
        plus = [c, c, c]
        minus = [c, c, c]
        plus[ax], minus[ax] = hi, lo
        d2 = u[(s, s) + tuple(plus)] + u[(s, s) + tuple(minus)] - ops.scale(center, 2.0)
        terms.append(ops.sum(d2 * d2))
    if mixed:
        for a1, a2 in ((0, 1), (0, 2), (1, 2)):
            corner = {}
            for b1, sl1 in ((1, hi), (0, lo)):
                for b2, sl2 in ((1, hi), (0, lo)):
                    idx = [c, c, c]
                    idx[a1], idx[a2] = sl1, sl2
                    corner[(b1, b2)] = u[(s, s) + tuple(idx)]
            dm = ops.scale(corner[(1, 1)] - corner[(1, 0)] - corner[(0, 1)] + corner[(0, 0)], 0.25)
            terms.append(ops.scale(ops.sum(dm * dm), 2.0))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ops.scale(total, 1.0 / (N * D * H * W))


SEG_VARIANTS = ("Segmentation", "FullyHardSharing", "CrossStitch")
REG_VARIANTS = ("Registration", "JRSRegistration", "FullyHardSharing", "CrossStitch")
WARPED_DICE_VARIANTS = ("JRSRegistration", "FullyHardSharing", "CrossStitch")


def resolution_terms(variant: str, out, target: dict, weights: LossWeights) -> dict:
    """Unweighted-by-resolution loss terms at one resolution."""
    terms = {}
    if variant in SEG_VARIANTS:
        if out.get("seg") is None:
            raise ContractError(f"{variant} output lacks a segmentation head")
        probs = ops.softmax(out["seg"], axis=1)
        terms["dice_seg"] = ops.scale(dice_loss(probs, target["fixed_seg"]), weights.w_dice)
    if variant in REG_VARIANTS:
        dvf = out.get("dvf")
        if dvf is None:
            raise ContractError(f"{variant} output lacks a DVF head")
        origin = target["origin"]
        warped = warp_trilinear(Tensor(target["moving"]), dvf, origin)
        terms["ncc"] = ops.scale(ncc_loss(warped, target["fixed"]), weights.w_ncc)
        terms["bend"] = ops.scale(bending_energy(dvf, weights.mixed_bending), weights.w_bend)
        if variant in WARPED_DICE_VARIANTS:
            warped_seg = warp_trilinear(Tensor(target["moving_seg"]), dvf, origin)
            terms["dice_reg"] = ops.scale(dice_loss(warped_seg, target["fixed_seg"]), weights.w_dice)
    if variant not in SEG_VARIANTS and variant not in REG_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    return terms


def total_loss(variant: str, outputs, targets: dict, weights: LossWeights = None):
    """Weighted sum over resolutions.

    Returns ``(total, breakdown)`` where ``breakdown`` maps each term name
    (``dice_seg``, ``dice_reg``, ``ncc``, ``bend``) and each resolution to its
    resolution-weighted float contribution.
    """
    weights = weights or LossWeights()
    total = None
    breakdown = {}
    for res, rw in zip(RESOLUTIONS, weights.resolution_weights):
        out = outputs[res]
        terms = resolution_terms(variant, out, targets[res], weights)
        res_total = None
        for name, term in terms.items():
            res_total = term if res_total is None else res_total + term
            breakdown[name] = breakdown.get(name, 0.0) + rw * term.item()
        weighted = ops.scale(res_total, rw)
        breakdown[res] = weighted.item()
        total = weighted if total is None else total + weighted
    return total, breakdown
