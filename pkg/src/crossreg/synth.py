"""Synthetic pelvic phantoms: planning/daily volume pairs with known deformation.

Anatomy is parametric (ellipsoids and a curved tube inside an elliptic body
with two bright bony blobs), so it can be rendered at arbitrary sample
coordinates.  Labels::

    0 background  1 bladder  2 prostate  3 seminal vesicles  4 rectum

Axis order is (z, y, x) everywhere; positions are in voxels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import logging
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, GenerationError
from .warping import warp_labels, warp_volume

log = logging.getLogger(__name__)

BACKGROUND, BLADDER, PROSTATE, VESICLES, RECTUM = range(5)
NUM_STRUCTURES = 5
TARGETS = (PROSTATE, VESICLES)
ORGANS_AT_RISK = (BLADDER, RECTUM)
STRATA = ("oar", "target", "remainder")

DEFAULT_INTENSITY = {
    "air": 0.02,
    "tissue": 0.45,
    "bone": 0.95,
    "bladder": 0.85,
    "prostate": 0.62,
    "seminal_vesicles": 0.48,
    "rectum": 0.18,
}


@dataclass
class PhantomSpec:
    size: int = 96
    spacing: float = 1.0
    noise: float = 0.02
    deform_magnitude: float = 3.0
    deform_smoothness: float = 8.0
    bladder_magnitude: float = 2.0
    intensity: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITY))
    pair_mode: str = "warp"  # or "independent": fixed is re-rendered at deformed coordinates
    min_voxels: int = 50
    max_retries: int = 20

    def __post_init__(self):
        if self.size < 32:
            raise ConfigError(f"phantom size {self.size} too small (>= 32)")
        if self.noise < 0 or self.deform_magnitude < 0 or self.bladder_magnitude < 0:
            raise ConfigError("noise and deformation magnitudes must be non-negative")
        if self.deform_smoothness <= 0:
            raise ConfigError("deformation smoothness must be positive")
        if self.pair_mode not in ("warp", "independent"):
            raise ConfigError(f"unknown pair_mode {self.pair_mode!r}")
        missing = set(DEFAULT_INTENSITY) - set(self.intensity)
        if missing:
            raise ConfigError(f"intensity table lacks {sorted(missing)}")
        if any(not 0.0 <= v <= 1.0 for v in self.intensity.values()):
            raise ConfigError("intensities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Anatomy:
    """Geometry parameters in voxels."""
    body: tuple
    bones: list
    bladder: tuple
    prostate: tuple
    vesicles: list
    rectum_z: tuple
    rectum_y: tuple
    rectum_x: float
    rectum_radius: float


@dataclass
class PhantomPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_seg: np.ndarray
    moving_seg: np.ndarray
    dvf: np.ndarray  # (3, D, H, W): fixed(p) ~ moving(p + dvf(p))
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> Anatomy:
    S = spec.size

    def jit(v, amount=0.02):
        return v + rng.uniform(-amount, amount)

    def ellipsoid(c, r, scale=1.0):
        center = tuple(jit(ci) * S for ci in c)
        radii = tuple(ri * S * scale * rng.uniform(0.9, 1.1) for ri in r)
        return center, radii

    body = ((0.5 * S, 0.5 * S, 0.5 * S), (0.47 * S, 0.40 * S, 0.46 * S))
    bones = [ellipsoid((0.55, 0.50, 0.5 + side * 0.30), (0.07, 0.07, 0.07)) for side in (-1, 1)]
    bladder = ellipsoid((0.36, 0.40, 0.50), (0.13, 0.12, 0.15), scale=rng.uniform(0.85, 1.15))
    prostate = ellipsoid((0.62, 0.44, 0.50), (0.075, 0.07, 0.08))
    vz, vy = jit(0.52), jit(0.585)
    vesicles = [(((vz * S), (vy * S), (0.5 + side * 0.075) * S),
                 (0.036 * S * rng.uniform(0.95, 1.1), 0.03 * S * rng.uniform(0.95, 1.1),
                  0.065 * S * rng.uniform(0.95, 1.1))) for side in (-1, 1)]
    rectum_z = (0.30 * S, 0.82 * S)
    rectum_y = (jit(0.68) * S, 0.05 * S * rng.uniform(0.7, 1.3), rng.uniform(0, np.pi))
    return Anatomy(body, bones, bladder, prostate, vesicles, rectum_z, rectum_y,
                   jit(0.5) * S, 0.05 * S * rng.uniform(0.9, 1.1))


def _inside_ellipsoid(coords, center, radii):
    z, y, x = coords
    return ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 \
        + ((x - center[2]) / radii[2]) ** 2 <= 1.0


def _inside_rectum(coords, a: Anatomy):
    z, y, x = coords
    z0, z1 = a.rectum_z
    yc, amp, phase = a.rectum_y
    t = (z - z0) / (z1 - z0)
    cy = yc + amp * np.sin(np.pi * t + phase)
    return (t >= 0) & (t <= 1) & ((y - cy) ** 2 + (x - a.rectum_x) ** 2 <= a.rectum_radius ** 2)


def render(a: Anatomy, coords, spec: PhantomSpec):
    """Noise-free intensities and labels sampled at ``coords`` (3 arrays)."""
    it = spec.intensity
    vol = np.full(coords[0].shape, it["air"], dtype=np.float64)
    labels = np.zeros(coords[0].shape, dtype=np.uint8)
    vol[_inside_ellipsoid(coords, *a.body)] = it["tissue"]
    for b in a.bones:
        vol[_inside_ellipsoid(coords, *b)] = it["bone"]
    # priority: earlier structures keep contested voxels
    masks = [
        (BLADDER, "bladder", _inside_ellipsoid(coords, *a.bladder)),
        (RECTUM, "rectum", _inside_rectum(coords, a)),
        (PROSTATE, "prostate", _inside_ellipsoid(coords, *a.prostate)),
        (VESICLES, "seminal_vesicles",
         _inside_ellipsoid(coords, *a.vesicles[0]) | _inside_ellipsoid(coords, *a.vesicles[1])),
    ]
    for label, key, m in masks:
        m = m & (labels == 0)
        labels[m] = label
        vol[m] = it[key]
    return vol, labels


def _grid(S):
    return np.meshgrid(*(np.arange(S, dtype=np.float64),) * 3, indexing="ij")


def _add_noise(vol, sigma, rng):
    if sigma > 0:
        vol = vol + rng.normal(0.0, sigma, size=vol.shape)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def generate_phantom(spec: PhantomSpec, seed, return_anatomy: bool = False):
    """Render one noisy phantom; returns (volume float32, labels uint8)."""
    rng = _rng(seed)
    grid = _grid(spec.size)
    for _ in range(spec.max_retries):
        anatomy = sample_anatomy(spec, rng)
        vol, labels = render(anatomy, grid, spec)
        counts = np.bincount(labels.ravel(), minlength=NUM_STRUCTURES)
        if counts[1:].min() >= spec.min_voxels:
            break
    else:
        raise GenerationError(f"could not place all structures with >= {spec.min_voxels} voxels")
    vol = _add_noise(vol, spec.noise, rng)
    if return_anatomy:
        return vol, labels, anatomy
    return vol, labels


def jacobian_determinant(dvf: np.ndarray) -> np.ndarray:
    """det(I + grad u) of the map p -> p + u(p), by central differences."""
    J = np.empty(dvf.shape[1:] + (3, 3))
    for i in range(3):
        grads = np.gradient(dvf[i])
        for j in range(3):
            J[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    return np.linalg.det(J)


def generate_deformation(size, magnitude: float, smoothness: float, seed, max_retries: int = 10) -> np.ndarray:
    """Smooth random field: Gaussian-filtered white noise scaled to max |u| = magnitude.

    For magnitude / smoothness below roughly 1 the map is invertible; the
    Jacobian determinant is checked and the field redrawn on a fold.
    """
    shape = (size,) * 3 if np.isscalar(size) else tuple(size)
    rng = _rng(seed)
    if magnitude == 0:
        return np.zeros((3,) + shape)
    for _ in range(max_retries):
        noise = rng.standard_normal((3,) + shape)
        field = np.stack([ndimage.gaussian_filter(noise[i], smoothness, mode="reflect") for i in range(3)])
        peak = np.sqrt((field ** 2).sum(axis=0)).max()
        field *= magnitude / peak
        if jacobian_determinant(field).min() > 0:
            return field
    raise GenerationError(f"no fold-free field after {max_retries} draws "
                          f"(magnitude {magnitude}, smoothness {smoothness})")


def bladder_field(shape, center, radii, amplitude: float) -> np.ndarray:
    """Radial displacement localized on the bladder (filling / emptying)."""
    z, y, x = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    r = float(np.mean(radii))
    d = np.stack([z - center[0], y - center[1], x - center[2]])
    w = np.exp(-(d ** 2).sum(axis=0) / (2 * (1.5 * r) ** 2))
    return amplitude * d / r * w


def make_pair(spec: PhantomSpec, seed) -> PhantomPair:
    """Moving phantom, ground-truth DVF, and the fixed volume it induces."""
    rng = _rng(seed)
    seed_int = int(seed) if not isinstance(seed, np.random.Generator) else 0
    moving, moving_seg, anatomy = generate_phantom(spec, rng, return_anatomy=True)
    S = spec.size
    for _ in range(spec.max_retries):
        dvf = generate_deformation(S, spec.deform_magnitude, spec.deform_smoothness, rng)
        if spec.bladder_magnitude > 0:
            amp = rng.uniform(-spec.bladder_magnitude, spec.bladder_magnitude)
            dvf = dvf + bladder_field((S,) * 3, anatomy.bladder[0], anatomy.bladder[1], amp)
        if jacobian_determinant(dvf).min() > 0:
            break
    else:
        raise GenerationError("combined deformation folds")
    if spec.pair_mode == "warp":
        fixed = _add_noise(warp_volume(moving.astype(np.float64), dvf), spec.noise, rng)
        fixed_seg = warp_labels(moving_seg, dvf)
    else:
        grid = _grid(S)
        coords = [grid[i] + dvf[i] for i in range(3)]
        clean, fixed_seg = render(anatomy, coords, spec)
        fixed = _add_noise(clean, spec.noise, rng)
    sp = (spec.spacing,) * 3
    return PhantomPair(fixed, moving, fixed_seg.astype(np.uint8), moving_seg, dvf.astype(np.float32),
                       seed_int, sp)


def strata_masks(seg: np.ndarray) -> dict:
    return {
        "oar": np.isin(seg, ORGANS_AT_RISK),
        "target": np.isin(seg, TARGETS),
        "remainder": seg == BACKGROUND,
    }


def patch_start(center, n_patch: int, size) -> tuple:
    return tuple(int(np.clip(c - n_patch // 2, 0, s - n_patch)) for c, s in zip(center, size))


def _extract(pair: PhantomPair, start, n):
    sl = tuple(slice(s, s + n) for s in start)
    return {
        "fixed": pair.fixed[sl],
        "moving": pair.moving[sl],
        "fixed_seg": pair.fixed_seg[sl],
        "moving_seg": pair.moving_seg[sl],
    }


def sample_patches(pair: PhantomPair, n_patch: int, count: int, seed, offset: int = 0) -> list:
    """Stratified patches: patch ``i`` is centered in stratum ``(i + offset) % 3``.

    Strata come from the fixed segmentation (organs at risk, targets,
    remainder).  Patch windows are clamped inside the volume.
    """
    size = pair.fixed.shape
    if n_patch > min(size):
        raise DimensionError(f"patch {n_patch} larger than volume {size}")
    rng = _rng(seed)
    masks = strata_masks(pair.fixed_seg)
    coords = {k: np.argwhere(m) for k, m in masks.items()}
    out = []
    for i in range(count):
        stratum = STRATA[(i + offset) % 3]
        if len(coords[stratum]) == 0:
            alternatives = [s for s in STRATA if len(coords[s])]
            log.warning("stratum %s is empty; sampling from %s instead", stratum, alternatives)
            stratum = alternatives[int(rng.integers(len(alternatives)))]
        center = coords[stratum][int(rng.integers(len(coords[stratum])))]
        start = patch_start(center, n_patch, size)
        patch = _extract(pair, start, n_patch)
        patch["stratum"] = stratum
        patch["start"] = start
        out.append(patch)
    return out
