import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossreg.autodiff import Tensor, backward
from crossreg.errors import DimensionError, ShapeError
from crossreg.warping import (avg_pool, make_multires_targets, one_hot, output_sizes, warp_labels,
                              warp_trilinear, warp_volume)

from oracles import warp_oracle


def test_zero_dvf_is_exact_identity():
    m = np.random.default_rng(0).normal(size=(2, 3, 5, 6, 7)).astype(np.float32)
    out = warp_trilinear(m, np.zeros((2, 3, 5, 6, 7), np.float32)).data
    assert np.array_equal(out, m)


@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 2**16))
def test_integer_shift_equals_slicing(dz, dy, dx, seed):
    m = np.random.default_rng(seed).normal(size=(1, 2, 12, 12, 12))
    dvf = np.empty((1, 3, 4, 4, 4))
    dvf[:, 0], dvf[:, 1], dvf[:, 2] = dz, dy, dx
    out = warp_trilinear(m, dvf, origin=(4, 4, 4)).data
    ref = m[:, :, 4 + dz:8 + dz, 4 + dy:8 + dy, 4 + dx:8 + dx]
    assert np.array_equal(out, ref)


def test_integer_shift_clamps_at_border():
    m = np.random.default_rng(1).normal(size=(6, 6, 6))
    dvf = np.zeros((3, 6, 6, 6))
    dvf[2] = 2
    out = warp_volume(m, dvf)
    ref = np.pad(m, ((0, 0), (0, 0), (0, 2)), mode="edge")[:, :, 2:]
    assert np.array_equal(out, ref)


def test_trilinear_matches_eight_corner_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        C = int(rng.integers(1, 3))
        M = tuple(int(v) for v in rng.integers(4, 8, size=3))
        o = tuple(int(v) for v in rng.integers(1, 3, size=3))
        d = tuple(int(v) for v in rng.integers(1, 4, size=3))
        d = tuple(min(a, b - c) for a, b, c in zip(d, M, o))
        moving = rng.normal(size=(1, C) + M)
        dvf = rng.normal(scale=2.0, size=(1, 3) + d)  # some samples leave the volume
        out = warp_trilinear(moving, dvf, origin=o).data[0]
        worst = max(worst, np.abs(out - warp_oracle(moving[0], dvf[0], o)).max())
    assert worst <= 1e-6


def test_dvf_gradient_zero_where_clamped():
    m = Tensor(np.random.default_rng(2).normal(size=(1, 1, 4, 4, 4)))
    d = np.zeros((1, 3, 4, 4, 4))
    d[:, 0] = 10.0  # every sample beyond the far z face
    dvf = Tensor(d, requires_grad=True)
    (g,) = backward(warp_trilinear(m, dvf).sum(), [dvf])
    assert np.all(g[:, 0] == 0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        warp_trilinear(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeError):
        warp_trilinear(np.zeros((1, 1, 5, 4, 4)), np.zeros((1, 3, 4, 4, 4)))


def test_warp_labels_nearest_and_batched():
    seg = np.zeros((6, 6, 6), np.uint8)
    seg[2:4, 2:4, 2:4] = 3
    dvf = np.zeros((3, 6, 6, 6))
    dvf[1] = 1.4  # rounds to one voxel
    out = warp_labels(seg, dvf)
    assert np.array_equal(out[2:4, 1:3, 2:4], np.full((2, 2, 2), 3))
    assert set(np.unique(out)) <= {0, 3}
    both = warp_labels(np.stack([seg, seg]), np.stack([dvf, np.zeros_like(dvf)]))
    assert np.array_equal(both[0], out) and np.array_equal(both[1], seg)


def test_avg_pool_and_one_hot():
    x = np.arange(64.0).reshape(1, 4, 4, 4)
    p = avg_pool(x, 2)
    assert p.shape == (1, 2, 2, 2)
    assert p[0, 0, 0, 0] == x[0, :2, :2, :2].mean()
    with pytest.raises(DimensionError):
        avg_pool(np.zeros((3, 4, 4)), 2)
    oh = one_hot(np.array([[[[0, 2]]]]), 3)
    assert oh.shape == (1, 3, 1, 1, 2)
    assert oh[0, :, 0, 0, 1].tolist() == [0, 0, 1]


@pytest.mark.parametrize("n", [48, 64, 96])
def test_multires_targets_align_with_heads(n):
    rng = np.random.default_rng(0)
    f = rng.normal(size=(1, 1, n, n, n))
    fs = one_hot(rng.integers(0, 5, size=(1, n, n, n)), 5)
    t = make_multires_targets(f, fs, f.copy(), fs.copy())
    sizes = output_sizes(n)
    for res, pool in (("high", 1), ("mid", 2), ("low", 4)):
        e = sizes[res]
        assert t[res]["fixed"].shape == (1, 1, e, e, e)
        assert t[res]["fixed_seg"].shape == (1, 5, e, e, e)
        assert t[res]["moving"].shape == (1, 1, n // pool, n // pool, n // pool)
        # warping the identical moving image with zero DVF reproduces the fixed target
        zero = np.zeros((1, 3, e, e, e))
        w = warp_trilinear(t[res]["moving"], zero, t[res]["origin"]).data
        assert np.array_equal(w, t[res]["fixed"])
    assert t["high"]["origin"] == (20, 20, 20)
