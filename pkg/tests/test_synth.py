import numpy as np
import pytest

from crossreg.errors import ConfigError, DimensionError
from crossreg.losses import ncc_loss
from crossreg.synth import (STRATA, PhantomSpec, generate_deformation, generate_phantom, jacobian_determinant,
                            make_pair, sample_patches, strata_masks)
from crossreg.warping import warp_volume


@pytest.fixture(scope="module")
def pair():
    return make_pair(PhantomSpec(size=48), 11)


def test_same_seed_same_pair(pair):
    again = make_pair(PhantomSpec(size=48), 11)
    for k in ("fixed", "moving", "fixed_seg", "moving_seg", "dvf"):
        assert np.array_equal(getattr(pair, k), getattr(again, k))
    other = make_pair(PhantomSpec(size=48), 12)
    assert not np.array_equal(pair.moving, other.moving)


def test_all_structures_present(pair):
    for seg in (pair.fixed_seg, pair.moving_seg):
        counts = np.bincount(seg.ravel(), minlength=5)
        assert counts[1:].min() >= 1
    assert np.bincount(pair.moving_seg.ravel(), minlength=5)[1:].min() >= 50


def test_ground_truth_warp_registers(pair):
    warped = warp_volume(pair.moving.astype(np.float64), pair.dvf.astype(np.float64))
    ncc = 1 - ncc_loss(warped[None, None], pair.fixed[None, None].astype(np.float64)).item()
    assert ncc >= 0.97


def test_deformations_fold_free(pair):
    assert jacobian_determinant(pair.dvf.astype(np.float64)).min() > 0
    u = generate_deformation(32, 3.0, 8.0, seed=0)
    assert np.sqrt((u ** 2).sum(0)).max() == pytest.approx(3.0)


def test_jacobian_of_affine_map():
    g = np.stack(np.meshgrid(*[np.arange(8.0)] * 3, indexing="ij"))
    u = 0.1 * g  # p -> 1.1 p
    assert np.allclose(jacobian_determinant(u), 1.1 ** 3)


def test_bladder_brighter_than_tissue(pair):
    vol, seg = pair.moving, pair.moving_seg
    assert vol[seg == 1].mean() > vol[seg == 2].mean() > vol[seg == 3].mean() > vol[seg == 4].mean()


def test_independent_mode():
    p = make_pair(PhantomSpec(size=48, pair_mode="independent"), 3)
    assert p.fixed.shape == (48, 48, 48)
    assert set(np.unique(p.fixed_seg)) <= {0, 1, 2, 3, 4}


def test_spec_validation():
    with pytest.raises(ConfigError):
        PhantomSpec(size=16)
    with pytest.raises(ConfigError):
        PhantomSpec(pair_mode="other")


def test_strata_partition(pair):
    masks = strata_masks(pair.fixed_seg)
    total = sum(m.astype(int) for m in masks.values())
    assert np.all(total == 1)


def test_patches_cycle_strata(pair):
    patches = sample_patches(pair, 32, 6, seed=0)
    assert [p["stratum"] for p in patches] == list(STRATA) * 2
    for p in patches:
        assert p["fixed"].shape == (32, 32, 32)
        s = p["start"]
        assert np.array_equal(p["fixed_seg"], pair.fixed_seg[s[0]:s[0] + 32, s[1]:s[1] + 32, s[2]:s[2] + 32])
    with pytest.raises(DimensionError):
        sample_patches(pair, 64, 1, seed=0)


def test_empty_stratum_falls_back(caplog):
    p = make_pair(PhantomSpec(size=48), 5)
    p.fixed_seg = np.zeros_like(p.fixed_seg)
    out = sample_patches(p, 32, 2, seed=0)
    assert all(o["stratum"] == "remainder" for o in out)
    assert "empty" in caplog.text
