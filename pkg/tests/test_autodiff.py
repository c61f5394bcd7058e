import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossreg import gradsuite
from crossreg.autodiff import (BatchNormState, Tensor, backward, batch_norm, center_crop, concat, conv3d,
                               leaky_relu, no_grad, set_backend, set_debug, upsample_nearest)
from crossreg.autodiff import gradcheck, ops
from crossreg.errors import ContractError, DimensionError, NumericalError, ShapeError, UninitializedStatsError

from oracles import conv3d_loops


@pytest.fixture(params=["numpy", "torch"])
def backend(request):
    if request.param == "torch":
        pytest.importorskip("torch")
    prev = set_backend(request.param)
    yield request.param
    set_backend(prev)


def test_broadcast_add_grad_sums_over_expanded_axes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    ga, gb = backward((a * b + b).sum(), [a, b])
    np.testing.assert_array_equal(ga, np.tile(np.arange(3.0), (2, 1)))
    np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])  # two rows of a, plus b broadcast twice


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (g,) = backward((y + y).sum(), [x])
    assert g[0] == pytest.approx(8.0)


def test_backward_rejects_vector_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_unreachable_param_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    gx, gu = backward(x.sum(), [x, unused])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.parents == ()


def test_debug_mode_flags_nan():
    set_debug(True)
    try:
        with pytest.raises(NumericalError):
            ops.sqrt(Tensor(np.array([-1.0])))
    finally:
        set_debug(False)


@pytest.mark.parametrize("stride,k", [(1, 3), (2, 2), (1, 1)])
def test_conv3d_matches_loop_oracle(backend, stride, k):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 5, 7))
    w = rng.normal(size=(4, 3, k, k, k))
    b = rng.normal(size=4)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
    np.testing.assert_allclose(out.data, conv3d_loops(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv3d_backends_agree_on_grads():
    pytest.importorskip("torch")
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 2, 7, 7, 7)), rng.normal(size=(3, 2, 3, 3, 3))
    r = rng.normal(size=(2, 3, 5, 5, 5))
    res = {}
    for name in ("numpy", "torch"):
        prev = set_backend(name)
        tx, tw = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        res[name] = backward((conv3d(tx, tw) * r).sum(), [tx, tw])
        set_backend(prev)
    for a, b in zip(res["numpy"], res["torch"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_conv3d_contract_errors():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeError):
        conv3d(x, Tensor(np.zeros((3, 1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.zeros((1, 2, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3, 3))))
    with pytest.raises(ContractError):
        conv3d(x, Tensor(np.zeros((3, 2, 2, 2, 2))), stride=3)


def test_upsample_repeats_each_voxel():
    x = np.arange(8.0).reshape(1, 1, 2, 2, 2)
    out = upsample_nearest(Tensor(x)).data
    assert out.shape == (1, 1, 4, 4, 4)
    np.testing.assert_array_equal(out[0, 0, 2:, :2, 2:], np.full((2, 2, 2), x[0, 0, 1, 0, 1]))


def test_center_crop_offsets_and_concat_order():
    x = np.arange(7.0).reshape(1, 1, 7, 1, 1) * np.ones((1, 1, 7, 3, 3))
    c = center_crop(Tensor(x), (3, 1, 1)).data
    np.testing.assert_array_equal(c.ravel(), [2.0, 3.0, 4.0])
    a = Tensor(np.zeros((1, 2, 3, 1, 1)))
    out = concat([a, center_crop(Tensor(x), (3, 1, 1))]).data
    assert out.shape == (1, 3, 3, 1, 1)
    np.testing.assert_array_equal(out[0, 2].ravel(), [2.0, 3.0, 4.0])


@given(st.floats(0.01, 0.99))
def test_leaky_relu_piecewise(slope):
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    np.testing.assert_allclose(leaky_relu(Tensor(x), slope).data, np.where(x > 0, x, slope * x))


def test_batch_norm_first_batch_sets_stats_then_ema():
    rng = np.random.default_rng(0)
    st_ = BatchNormState(2, momentum=0.9, dtype=np.float64)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    x1 = rng.normal(size=(2, 2, 3, 3, 3)) + 5
    batch_norm(Tensor(x1), g, b, st_, training=True)
    np.testing.assert_allclose(st_.mean, x1.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(st_.var, x1.var(axis=(0, 2, 3, 4)))
    x2 = rng.normal(size=(2, 2, 3, 3, 3))
    batch_norm(Tensor(x2), g, b, st_, training=True)
    np.testing.assert_allclose(st_.mean, 0.9 * x1.mean(axis=(0, 2, 3, 4)) + 0.1 * x2.mean(axis=(0, 2, 3, 4)))


def test_batch_norm_training_output_is_standardized():
    x = np.random.default_rng(2).normal(3.0, 2.0, size=(4, 3, 4, 4, 4))
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState(3, dtype=np.float64), True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)


def test_batch_norm_eval_without_stats_raises():
    with pytest.raises(UninitializedStatsError):
        batch_norm(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   BatchNormState(2), training=False)


def test_numeric_grad_handles_non_contiguous_inputs():
    # a transposed array once made the perturbation land on a copy
    a = np.asfortranarray(np.random.default_rng(0).normal(size=(3, 4)))
    g = gradcheck.numeric_grad(lambda t: (t * t).sum(), [a], 0)
    np.testing.assert_allclose(g, 2 * a, rtol=1e-6)


@pytest.mark.parametrize("name", [c[0] for c in gradsuite._cases(np.random.default_rng(0))])
def test_gradient_suite_case(backend, name):
    (res,) = gradsuite.run(only=[name])
    assert res.elements <= 10_000
    assert res.passed, f"{name}: {res.errors}"
