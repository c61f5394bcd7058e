import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossreg.autodiff import Tensor
from crossreg.errors import ConfigError, ContractError, DimensionError, ShapeError
from crossreg.losses import LossWeights, bending_energy, dice_loss, ncc_loss, total_loss
from crossreg.network import NetworkSpec, build, VARIANTS
from crossreg.warping import make_multires_targets, one_hot


def test_dice_zero_on_identical_crisp_masks():
    labels = np.random.default_rng(0).integers(0, 4, size=(2, 6, 6, 6))
    oh = one_hot(labels, 4, np.float64)
    assert dice_loss(oh, oh).item() <= 1e-4


def test_dice_one_on_disjoint_masks():
    a = np.zeros((1, 2, 4, 4, 4))
    b = np.zeros((1, 2, 4, 4, 4))
    a[0, 1, :2] = 1
    b[0, 1, 2:] = 1
    a[0, 0], b[0, 0] = 1 - a[0, 1], 1 - b[0, 1]
    assert dice_loss(a, b).item() == pytest.approx(1.0, abs=1e-6)


def test_dice_ignores_background_channel():
    t = one_hot(np.random.default_rng(1).integers(0, 3, size=(1, 4, 4, 4)), 3, np.float64)
    p = t.copy()
    p[:, 0] = 0.3  # background probability is never scored
    assert dice_loss(p, t).item() <= 1e-4


@given(st.floats(0.1, 10), st.floats(-20, 20), st.integers(0, 1000))
def test_ncc_invariant_to_positive_affine(scale, shift, seed):
    a = np.random.default_rng(seed).normal(size=(2, 1, 5, 5, 5))
    assert abs(ncc_loss(a, scale * a + shift).item()) <= 1e-6


def test_ncc_anchor_three_a_plus_seven():
    a = np.random.default_rng(3).normal(size=(1, 1, 8, 8, 8))
    assert abs(ncc_loss(a, 3 * a + 7).item()) <= 1e-6
    assert ncc_loss(a, -a).item() == pytest.approx(2.0, abs=1e-6)


def test_ncc_finite_on_constant_input():
    v = ncc_loss(np.ones((1, 1, 3, 3, 3)), np.random.default_rng(0).normal(size=(1, 1, 3, 3, 3))).item()
    assert np.isfinite(v)


def _affine_dvf(A, t, shape=(6, 7, 8)):
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij"))
    return (np.einsum("ij,j...->i...", A, grid) + np.asarray(t).reshape(3, 1, 1, 1))[None]


@given(st.lists(st.integers(-24, 24), min_size=12, max_size=12))
def test_bending_energy_zero_on_affine(vals):
    # quarter-integer coefficients keep every difference exact in floating point
    v = np.array(vals, dtype=float) / 4
    assert bending_energy(_affine_dvf(v[:9].reshape(3, 3), v[9:])).item() == 0.0


@given(st.lists(st.floats(-3, 3), min_size=12, max_size=12))
def test_bending_energy_rounding_level_on_float_affine(vals):
    A, t = np.array(vals[:9]).reshape(3, 3), vals[9:]
    assert bending_energy(_affine_dvf(A, t)).item() <= 1e-24


def test_bending_energy_quadratic_value():
    # u_x = z^2 has d2/dz2 = 2 everywhere, so each interior voxel contributes 4
    D, H, W = 6, 5, 7
    z = np.arange(D, dtype=float).reshape(D, 1, 1)
    dvf = np.zeros((1, 3, D, H, W))
    dvf[0, 2] = z ** 2 * np.ones((D, H, W))
    interior = (D - 2) * (H - 2) * (W - 2)
    assert bending_energy(dvf).item() == pytest.approx(4 * interior / (D * H * W))
    # a pure mixed term u_x = y*z: only d2/dydz = 1, counted twice
    dvf[0, 2] = np.arange(D).reshape(D, 1, 1) * np.arange(H).reshape(1, H, 1) * np.ones((D, H, W))
    assert bending_energy(dvf).item() == pytest.approx(2 * interior / (D * H * W))
    assert bending_energy(dvf, mixed=False).item() == pytest.approx(0.0)


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((1, 2, 3, 3, 3)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(DimensionError):
        bending_energy(np.zeros((1, 3, 2, 5, 5)))
    with pytest.raises(ConfigError):
        LossWeights(resolution_weights=(0.5, 0.5, 0.5))


EXPECTED_TERMS = {
    "Segmentation": {"dice_seg"},
    "Registration": {"ncc", "bend"},
    "JRSRegistration": {"ncc", "bend", "dice_reg"},
    "FullyHardSharing": {"dice_seg", "ncc", "bend", "dice_reg"},
    "CrossStitch": {"dice_seg", "ncc", "bend", "dice_reg"},
}


@pytest.mark.parametrize("variant", VARIANTS)
def test_total_loss_terms_per_variant(variant):
    n = 48
    rng = np.random.default_rng(0)
    f = rng.normal(size=(1, 1, n, n, n)).astype(np.float32)
    s = one_hot(rng.integers(0, 5, size=(1, n, n, n)), 5)
    net = build(NetworkSpec(variant, (2, 2, 2, 2, 2), n))
    out = net(f, f, s, training=True)
    targets = make_multires_targets(f, s, f, s)
    total, parts = total_loss(variant, out, targets)
    terms = {k for k in parts if k not in ("high", "mid", "low")}
    assert terms == EXPECTED_TERMS[variant]
    assert total.item() == pytest.approx(sum(parts[k] for k in terms), rel=1e-5)
    assert total.item() == pytest.approx(parts["high"] + parts["mid"] + parts["low"], rel=1e-5)


def test_total_loss_requires_heads():
    n = 48
    f = np.zeros((1, 1, n, n, n), np.float32)
    s = one_hot(np.zeros((1, n, n, n), int), 5)
    out = build(NetworkSpec("Segmentation", (2, 2, 2, 2, 2), n))(f, training=True)
    with pytest.raises(ContractError):
        total_loss("Registration", out, make_multires_targets(f, s, f, s))
