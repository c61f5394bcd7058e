"""Finite-difference check of every differentiable primitive.

Each case feeds small random float64 inputs through one op (followed by a
fixed random projection to a scalar) and compares the analytic gradient
with central differences.  Used by ``crossreg gradcheck`` and the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
import time
from typing import Callable, Optional

import numpy as np

from . import cross_stitch
from .autodiff import gradcheck, ops
from .losses import bending_energy, dice_loss, ncc_loss
from .warping import warp_trilinear

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    errors: list
    elements: int
    seconds: float

    @property
    def max_error(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _project(out, rng):
    r = rng.normal(size=out.shape)
    return ops.sum(out * r)


def _away_from_zero(rng, shape, margin=0.05):
    u = rng.normal(size=shape)
    return np.sign(u) * (np.abs(u) + margin)


def _cases(rng):
    """Yield ``(name, fn, arrays)``; ``fn`` maps Tensors to a scalar Tensor."""

    def proj(out):
        return _project(out, np.random.default_rng(7))

    yield ("conv3d", lambda x, w, b: proj(ops.conv3d(x, w, b)),
           [rng.normal(size=(2, 2, 5, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)])
    yield ("conv3d_stride2", lambda x, w, b: proj(ops.conv3d(x, w, b, stride=2)),
           [rng.normal(size=(1, 3, 6, 6, 6)), rng.normal(size=(3, 3, 2, 2, 2)), rng.normal(size=3)])
    yield ("upsample_nearest", lambda x: proj(ops.upsample_nearest(x)), [rng.normal(size=(2, 2, 3, 3, 3))])

    def bn(x, g, b):
        state = ops.BatchNormState(x.shape[1], dtype=np.float64)
        return proj(ops.batch_norm(x, g, b, state, training=True))

    yield ("batch_norm", bn, [rng.normal(size=(3, 2, 4, 4, 4)) * 2 + 1, rng.normal(size=2), rng.normal(size=2)])

    def bn_eval(x, g, b):
        state = ops.BatchNormState(x.shape[1], dtype=np.float64)
        state.mean[:] = [0.3, -0.2]
        state.var[:] = [1.5, 0.7]
        state.initialized = True
        return proj(ops.batch_norm(x, g, b, state, training=False))

    yield ("batch_norm_eval", bn_eval, [rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2), rng.normal(size=2)])
    yield ("leaky_relu", lambda x: proj(ops.leaky_relu(x, 0.2)), [_away_from_zero(rng, (2, 3, 4, 4, 4))])

    def crop_concat(a, b):
        return proj(ops.concat([a, ops.center_crop(b, a.shape[2:])]))

    yield ("crop_concat", crop_concat, [rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=(2, 3, 6, 5, 7))])
    yield ("softmax", lambda x: proj(ops.softmax(x, axis=1)), [rng.normal(size=(2, 5, 3, 3, 3))])

    # displacements keep sample points inside the volume and off the integer grid
    frac = rng.uniform(0.2, 0.8, size=(1, 3, 4, 4, 4))
    dvf = frac + rng.integers(-1, 1, size=frac.shape)
    yield ("warp_trilinear", lambda m, d: proj(warp_trilinear(m, d, origin=(1, 1, 1))),
           [rng.normal(size=(1, 2, 6, 6, 6)), dvf])

    logits = rng.normal(size=(2, 3, 4, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4, 4))
    onehot = np.moveaxis(np.eye(3)[labels], -1, 1)
    yield ("dice_loss", lambda x, t: dice_loss(ops.softmax(x, axis=1), t), [logits, onehot + 0.0])
    yield ("ncc_loss", lambda a, b: ncc_loss(a, b), [rng.normal(size=(2, 1, 5, 5, 5)), rng.normal(size=(2, 1, 5, 5, 5))])
    yield ("bending_energy", lambda d: bending_energy(d), [rng.normal(size=(1, 3, 5, 5, 5))])

    def stitch(xs, xr, alpha):
        ys, yr = cross_stitch.apply(cross_stitch.CrossStitchUnit(alpha), xs, xr)
        return proj(ops.concat([ys, yr]))

    yield ("cross_stitch", stitch, [rng.normal(size=(2, 3, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3, 3)),
                                    rng.uniform(0, 1, size=(3, 2, 2))])


def run(seed: int = 0, h: float = 1e-5, only: Optional[list] = None,
        report: Optional[Callable[[CaseResult], None]] = None) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, arrays in _cases(rng):
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        errs = gradcheck.check(fn, arrays, h=h)
        res = CaseResult(name, errs, sum(a.size for a in arrays), time.perf_counter() - t0)
        results.append(res)
        if report:
            report(res)
    return results
