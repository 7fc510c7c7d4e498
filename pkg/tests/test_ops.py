import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import loop_conv, tent
from polypfcn import ops
from polypfcn.errors import ConfigurationError, DimensionError, ValidationError
from polypfcn.gradcheck import grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- convolution

def test_identity_kernel_returns_input():
    x = rng().normal(size=(2, 1, 5, 6))
    out = ops.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_all_ones_kernel_sums_window():
    out = ops.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="channel"):
        ops.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))


def test_non_integral_output_size_is_configuration_error():
    with pytest.raises(ConfigurationError):
        ops.conv2d_forward(np.zeros((1, 1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2)


def test_empty_axis_rejected():
    with pytest.raises(DimensionError):
        ops.check_tensor(np.zeros((0, 1, 2, 2)))


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(1, 3))
def test_conv_matches_loop_oracle(seed, stride, k, pad, c):
    r = rng(seed)
    size = k + stride * int(r.integers(0, 4)) - 2 * pad
    if size < 1:
        size += stride * ((2 * pad - k) // stride + 1)
    x = r.normal(size=(2, c, size, size + stride))
    kernel = r.normal(size=(3, c, k, k))
    bias = r.normal(size=3)
    out = ops.conv2d_forward(x, kernel, bias, stride, pad)
    np.testing.assert_allclose(out, loop_conv(x, kernel, bias, stride, pad), atol=1e-12)
    assert out.shape[2] == (size + 2 * pad - k) // stride + 1


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4))
def test_transpose_is_adjoint_of_conv(seed, stride, k):
    """<conv(x), y> == <x, conv_transpose(y)> for the same kernel."""
    r = rng(seed)
    h = k + stride * int(r.integers(0, 4))
    x = r.normal(size=(2, 3, h, h))
    kernel = r.normal(size=(4, 3, k, k))
    y = r.normal(size=ops.conv2d_forward(x, kernel, stride=stride).shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        xt = ops.conv2d_transpose(y, kernel, stride)
    assert xt.shape == x.shape
    assert np.isclose(np.sum(ops.conv2d_forward(x, kernel, stride=stride) * y), np.sum(x * xt), rtol=1e-10)


def test_transpose_single_scatter():
    out = ops.conv2d_transpose(np.full((1, 1, 1, 1), 2.5), np.ones((1, 1, 2, 2)), stride=2)
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))


def test_transpose_output_size():
    out = ops.conv2d_transpose(np.zeros((1, 2, 3, 5)), np.zeros((2, 1, 4, 4)), stride=2)
    assert out.shape == (1, 1, (3 - 1) * 2 + 4, (5 - 1) * 2 + 4)


def test_transpose_kernel_smaller_than_stride_warns():
    with pytest.warns(RuntimeWarning, match="smaller than stride"):
        ops.conv2d_transpose(np.ones((1, 1, 2, 2)), np.ones((1, 1, 1, 1)), stride=2)


def test_bilinear_upsampling_of_constant_is_constant_in_interior():
    for s in (2, 4, 8):
        out = ops.conv2d_transpose(np.full((1, 2, 6, 6), 3.0), ops.bilinear_kernel(2 * s, 2), s)
        inner = out[:, :, 2 * s:-2 * s, 2 * s:-2 * s]
        np.testing.assert_allclose(inner, 3.0, atol=1e-12)


# ---------------------------------------------------------------- bilinear kernel

def test_bilinear_size_two():
    k = ops.bilinear_kernel(2, 1)
    np.testing.assert_array_equal(k[0, 0], np.full((2, 2), 0.25))


def test_bilinear_size_four_against_tent_formula():
    frozen = [0.25, 0.75, 0.75, 0.25]  # tent(4) with factor 2, centre 1.5
    assert tent(4) == frozen
    np.testing.assert_allclose(ops.bilinear_kernel(4, 1)[0, 0], np.outer(frozen, frozen), atol=0)


@given(st.integers(2, 17), st.integers(1, 4))
def test_bilinear_symmetric_and_channel_diagonal(size, channels):
    k = ops.bilinear_kernel(size, channels)
    assert k.shape == (channels, channels, size, size)
    np.testing.assert_array_equal(k, k[:, :, ::-1, :])
    np.testing.assert_array_equal(k, k[:, :, :, ::-1])
    off = k.copy()
    off[np.arange(channels), np.arange(channels)] = 0
    assert not off.any()
    np.testing.assert_allclose(k[0, 0], np.outer(tent(size), tent(size)), atol=1e-15)


# ---------------------------------------------------------------- relu

def test_relu_signs():
    neg = -rng().random((1, 2, 3, 3)) - 0.1
    assert not ops.relu(neg).any()
    np.testing.assert_array_equal(ops.relu(-neg), -neg)


def test_relu_backward_matches_central_differences():
    x = rng(1).normal(size=(2, 3, 5, 5))
    x[np.abs(x) < 0.05] = 0.5  # keep probes away from the kink
    res = grad_check(lambda z: ops.relu(z).sum(), x, ops.relu_backward(np.ones_like(x), x))
    assert res.max_rel_error < 1e-6


# ---------------------------------------------------------------- max pooling

def test_maxpool_picks_bottom_right():
    out, arg = ops.maxpool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.item() == 4.0 and arg.item() == 3


def test_maxpool_tie_goes_to_first_element():
    x = np.full((1, 1, 4, 4), 7.0)
    out, arg = ops.maxpool(x)
    np.testing.assert_array_equal(out, 7.0)
    # flat offsets of each window's top-left pixel
    np.testing.assert_array_equal(arg[0, 0], [[0, 2], [8, 10]])


def test_maxpool_incompatible_dims():
    with pytest.raises((DimensionError, ConfigurationError)):
        ops.maxpool(np.zeros((1, 1, 5, 5)), 2, 2, ceil_mode=False)


def test_maxpool_ceil_mode_covers_ragged_edge():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out, _ = ops.maxpool(x, 2, 2, ceil_mode=True)
    assert out.shape == (1, 1, 3, 3) and out[0, 0, 2, 2] == 24.0


def test_maxpool_backward_matches_central_differences():
    x = rng(2).permutation(np.linspace(-1, 1, 2 * 2 * 8 * 8)).reshape(2, 2, 8, 8)  # no ties
    out, arg = ops.maxpool(x)
    w = rng(3).normal(size=out.shape)
    analytic = ops.maxpool_backward(w, arg, x.shape)
    res = grad_check(lambda z: np.sum(ops.maxpool(z)[0] * w), x, analytic)
    assert res.max_rel_error < 1e-6


# ---------------------------------------------------------------- batch norm

def test_batchnorm_normalizes_random_batch():
    x = rng(4).normal(3.0, 2.5, size=(4, 3, 6, 6))
    state = ops.BatchNormState.identity(3)
    out, _ = ops.batchnorm(x, state, "train")
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_batchnorm_standardized_input_passes_through():
    x = rng(5).normal(size=(4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _ = ops.batchnorm(x, ops.BatchNormState.identity(2), "train")
    # the only difference is the epsilon in the denominator, a relative 5e-6
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-12)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-10)


def test_batchnorm_constant_input_folds_to_beta():
    state = ops.BatchNormState.identity(2)
    state.beta[:] = [0.3, -1.2]
    out, _ = ops.batchnorm(np.full((2, 2, 3, 3), 5.0), state, "train")
    np.testing.assert_allclose(out[:, 0], 0.3)
    np.testing.assert_allclose(out[:, 1], -1.2)


def test_batchnorm_single_value_per_channel_rejected():
    with pytest.raises(ValidationError):
        ops.batchnorm(np.zeros((1, 2, 1, 1)), ops.BatchNormState.identity(2), "train")


def test_batchnorm_running_stats_update():
    x = rng(6).normal(size=(2, 1, 4, 4))
    state = ops.BatchNormState.identity(1)
    ops.batchnorm(x, state, "train")
    assert np.isclose(state.running_mean[0], 0.1 * x.mean())
    assert np.isclose(state.running_var[0], 0.9 + 0.1 * x.var(ddof=1))
    assert (state.running_var >= 0).all()


@given(st.integers(0, 10_000))
def test_batchnorm_infer_is_per_element(seed):
    r = rng(seed)
    state = ops.BatchNormState(r.normal(size=2), r.normal(size=2), r.normal(size=2), r.random(2) + 0.1)
    a = r.normal(size=(3, 2, 4, 4))
    b = r.normal(size=(5, 2, 4, 4)) * 10
    b[1] = a[2]
    out_a, _ = ops.batchnorm(a, state, "infer")
    out_b, _ = ops.batchnorm(b, state, "infer")
    np.testing.assert_array_equal(out_a[2], out_b[1])


# ---------------------------------------------------------------- softmax cross-entropy

def test_equal_scores_give_log_two():
    loss, _ = ops.softmax_xent(np.zeros((2, 2, 3, 3)), rng().integers(0, 2, (2, 3, 3)))
    assert loss == pytest.approx(np.log(2), abs=1e-15)


def test_saturated_softmax():
    scores = np.zeros((1, 2, 2, 2))
    scores[:, 1] = 60.0
    loss, _ = ops.softmax_xent(scores, np.ones((1, 2, 2), dtype=int))
    assert loss < 1e-20


def test_ignored_pixels_contribute_nothing():
    r = rng(7)
    scores = r.normal(size=(1, 2, 4, 4))
    labels = r.integers(0, 2, (1, 4, 4))
    labels[0, :2] = ops.IGNORE
    loss, grad = ops.softmax_xent(scores, labels)
    assert not grad[0, :, :2].any()
    sub, _ = ops.softmax_xent(scores[:, :, 2:], labels[:, 2:])
    assert loss == pytest.approx(sub, rel=1e-14)


def test_bad_label_rejected():
    with pytest.raises(ValidationError):
        ops.softmax_xent(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 3))


def test_softmax_xent_gradient_central_differences():
    r = rng(8)
    scores = r.normal(size=(1, 2, 4, 4))
    labels = r.integers(0, 2, (1, 4, 4))
    _, grad = ops.softmax_xent(scores, labels)
    res = grad_check(lambda s: ops.softmax_xent(s, labels)[0], scores, grad)
    assert res.max_rel_error < 1e-6


@given(st.integers(0, 10_000), st.sampled_from(["mean", "sum"]))
def test_loss_nonnegative_and_gradient_sums_to_zero(seed, reduction):
    r = rng(seed)
    scores = r.normal(scale=5, size=(2, 2, 3, 4))
    loss, grad = ops.softmax_xent(scores, r.integers(0, 2, (2, 3, 4)), reduction)
    assert loss >= 0
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)


def test_sum_reduction_is_count_times_mean():
    r = rng(9)
    scores, labels = r.normal(size=(2, 2, 3, 3)), r.integers(0, 2, (2, 3, 3))
    mean, gm = ops.softmax_xent(scores, labels, "mean")
    total, gs = ops.softmax_xent(scores, labels, "sum")
    assert total == pytest.approx(18 * mean, rel=1e-14)
    np.testing.assert_allclose(gs, 18 * gm, rtol=1e-14)
