"""Convolution written as an explicit sparse matrix acting on flattened maps."""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError
from .ops import conv_output_size


@dataclass(frozen=True)
class ConvMatrix:
    """Sparse operator C with vec(out) = C @ vec(in).

    Vectors are row-major flattenings of (C, H, W) maps: channel slowest,
    column fastest.
    """

    matrix: sp.csr_matrix
    in_shape: tuple
    out_shape: tuple

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, x):
        """Convolve a (N, C, H, W) batch through the matrix."""
        n = x.shape[0]
        flat = x.reshape(n, -1).T
        return np.asarray(self.matrix @ flat).T.reshape((n,) + self.out_shape)

    def apply_transpose(self, y):
        """Multiply by C^T: the transpose convolution of a (N, F, Ho, Wo) batch."""
        n = y.shape[0]
        flat = y.reshape(n, -1).T
        return np.asarray(self.matrix.T @ flat).T.reshape((n,) + self.in_shape)

    def nnz_per_row(self):
        return np.diff(self.matrix.indptr)


def conv2d_as_matrix(kernel, input_shape, stride=1, padding=0):
    """Build the D x (C*H*W) matrix of a strided convolution.

    ``kernel`` is either a 2-D (Kh, Kw) filter or a 4-D (F, C, Kh, Kw) bank;
    ``input_shape`` is (H, W).  With F output channels there are F*D rows.
    Entries that would read zero padding are dropped, so border rows of a
    padded convolution hold fewer than Kh*Kw nonzeros.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim == 2:
        kernel = kernel[None, None]
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 2-D or 4-D, got shape {kernel.shape}")
    f, c, kh, kw = kernel.shape
    h, w = input_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    # one entry per (out channel, in channel, out row, out col, kernel row, kernel col)
    fo, ci, oi, oj, ki, kj = np.meshgrid(
        np.arange(f), np.arange(c), np.arange(ho), np.arange(wo), np.arange(kh), np.arange(kw), indexing="ij"
    )
    r = oi * stride + ki - padding
    s = oj * stride + kj - padding
    inside = (r >= 0) & (r < h) & (s >= 0) & (s < w)
    rows = ((fo * ho + oi) * wo + oj)[inside]
    cols = ((ci * h + r) * w + s)[inside]
    vals = kernel[fo, ci, ki, kj][inside]
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(f * ho * wo, c * h * w))
    return ConvMatrix(matrix, (c, h, w), (f, ho, wo))
