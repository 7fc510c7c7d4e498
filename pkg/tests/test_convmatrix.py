import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from oracles import dense_conv_matrix
from polypfcn import ops
from polypfcn.convmatrix import conv2d_as_matrix
from polypfcn.errors import ConfigurationError


def test_row_count_stride_one():
    cm = conv2d_as_matrix(np.ones((3, 3)), (5, 5))
    assert cm.shape == (9, 25)


def test_row_count_and_nonzeros_stride_two():
    cm = conv2d_as_matrix(np.arange(1.0, 5.0).reshape(2, 2), (4, 4), stride=2)
    assert cm.shape == (4, 16)
    np.testing.assert_array_equal(cm.nnz_per_row(), 4)


def test_indivisible_stride_rejected():
    with pytest.raises(ConfigurationError):
        conv2d_as_matrix(np.ones((3, 3)), (6, 6), stride=2)


def test_matches_loop_built_matrix():
    r = np.random.default_rng(0)
    k = r.normal(size=(3, 3))
    for (h, w), s in (((5, 5), 1), ((7, 9), 2), ((6, 6), 3)):
        np.testing.assert_array_equal(conv2d_as_matrix(k, (h, w), s).matrix.toarray(),
                                      dense_conv_matrix(k, h, w, s))


def test_random_six_by_six_equals_dense_convolution():
    r = np.random.default_rng(1)
    x, k = r.normal(size=(1, 1, 6, 6)), r.normal(size=(1, 1, 3, 3))
    cm = conv2d_as_matrix(k, (6, 6))
    np.testing.assert_allclose(cm.apply(x), ops.conv2d_forward(x, k), atol=1e-12)


def test_five_by_five_single_channel_oracle():
    r = np.random.default_rng(2)
    x, k = r.normal(size=(1, 1, 5, 5)), r.normal(size=(1, 1, 3, 3))
    c = dense_conv_matrix(k[0, 0], 5, 5, 1)
    np.testing.assert_allclose(ops.conv2d_forward(x, k).ravel(), c @ x.ravel(), atol=1e-10)


def test_transpose_three_by_three_input_four_by_four_kernel():
    r = np.random.default_rng(3)
    y, k = r.normal(size=(1, 1, 3, 3)), r.normal(size=(1, 1, 4, 4))
    # the forward this transposes maps 8x8 -> 3x3 with stride 2
    c = dense_conv_matrix(k[0, 0], 8, 8, 2)
    np.testing.assert_allclose(ops.conv2d_transpose(y, k, 2).ravel(), c.T @ y.ravel(), atol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2))
def test_interior_rows_hold_full_kernel(seed, stride, k, pad):
    h = k + stride * 3 - 2 * pad
    if h < k:
        return
    kernel = np.random.default_rng(seed).random((k, k)) + 0.5  # no zero weights
    cm = conv2d_as_matrix(kernel, (h, h), stride, pad)
    nnz = cm.nnz_per_row().reshape(cm.out_shape[1:])
    assert nnz.max() <= k * k
    if pad == 0:
        assert (nnz == k * k).all()


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2),
       st.integers(1, 3), st.integers(1, 3))
def test_padded_multichannel_equivalence(seed, stride, k, pad, c, f):
    r = np.random.default_rng(seed)
    ho, wo = r.integers(1, 5, size=2)
    h, w = (ho - 1) * stride + k - 2 * pad, (wo - 1) * stride + k - 2 * pad
    assume(h >= 1 and w >= 1)
    x = r.normal(size=(2, c, h, w))
    kernel = r.normal(size=(f, c, k, k))
    cm = conv2d_as_matrix(kernel, (h, w), stride, pad)
    np.testing.assert_allclose(cm.apply(x), ops.conv2d_forward(x, kernel, stride=stride, padding=pad), atol=1e-10)
