"""Layer kernels on dense (N, C, H, W) arrays.

Every forward function is pure and returns whatever its backward needs;
backward functions take the upstream gradient first.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, ValidationError

IGNORE = 255

AXES = ("batch", "channel", "row", "col")


def check_tensor(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"{name} must have 4 axes (batch, channel, row, col), got shape {x.shape}")
    for axis, n in zip(AXES, x.shape):
        if n < 1:
            raise DimensionError(f"{name} {axis} axis is empty")
    return x


def conv_output_size(size, kernel, stride, padding=0):
    """Output length of a strided window along one axis; raises if the windows don't tile."""
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigurationError(
            f"(input {size} + 2*pad {padding} - kernel {kernel}) = {span} is not divisible by stride {stride}"
        )
    return span // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols, out_shape, stride):
    """Adjoint of ``_windows``: add (N, Ho, Wo, C, kh, kw) patches into an (N, C, H, W) array."""
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return out


def _check_kernel(kernel, channels, axis_name):
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must have 4 axes, got shape {kernel.shape}")
    if kernel.shape[1 if axis_name == "input" else 0] != channels:
        raise DimensionError(
            f"channel axis mismatch: {axis_name} has {channels} channels, kernel shape {kernel.shape}"
        )
    return kernel


def conv2d_forward(x, kernel, bias=None, stride=1, padding=0):
    """Strided cross-correlation with zero padding.

    ``kernel`` is (F, C, Kh, Kw); output is (N, F, (H+2p-Kh)/S+1, (W+2p-Kw)/S+1).
    """
    x = check_tensor(x)
    kernel = _check_kernel(kernel, x.shape[1], "input")
    f, _, kh, kw = kernel.shape
    conv_output_size(x.shape[2], kh, stride, padding)
    conv_output_size(x.shape[3], kw, stride, padding)
    win = _windows(_pad(x, padding), kh, kw, stride)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (f,):
            raise DimensionError(f"bias must have shape ({f},), got {bias.shape}")
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(dout, x, kernel, stride=1, padding=0):
    """Gradients (dx, dkernel, dbias) of ``conv2d_forward``."""
    _, _, kh, kw = kernel.shape
    xp = _pad(x, padding)
    win = _windows(xp, kh, kw, stride)
    dkernel = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dbias = dout.sum(axis=(0, 2, 3))
    cols = np.tensordot(dout, kernel, axes=([1], [0]))
    dxp = _scatter_windows(cols, xp.shape, stride)
    h, w = x.shape[2:]
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dx), dkernel, dbias


def conv2d_transpose(x, kernel, stride=1):
    """Transpose convolution (the adjoint of ``conv2d_forward`` with the same kernel, no padding).

    ``kernel`` is (C_in, C_out, Kh, Kw): the layout of the forward convolution
    that maps C_out channels down to C_in.  Output spatial size is
    ((H-1)*S + Kh, (W-1)*S + Kw).
    """
    x = check_tensor(x)
    kernel = _check_kernel(kernel, x.shape[1], "output")
    _, c_out, kh, kw = kernel.shape
    if kh < stride or kw < stride:
        warnings.warn(
            f"transpose convolution kernel {kh}x{kw} is smaller than stride {stride}; output has gaps",
            RuntimeWarning,
            stacklevel=2,
        )
    n, _, h, w = x.shape
    cols = np.tensordot(x, kernel, axes=([1], [0]))
    return _scatter_windows(cols, (n, c_out, (h - 1) * stride + kh, (w - 1) * stride + kw), stride)


def conv2d_transpose_backward(dout, x, kernel, stride=1):
    """Gradients (dx, dkernel) of ``conv2d_transpose``."""
    _, _, kh, kw = kernel.shape
    dx = conv2d_forward(dout, kernel, None, stride, 0)
    win = _windows(dout, kh, kw, stride)
    dkernel = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    return dx, dkernel


def bilinear_kernel(size, channels):
    """Channel-diagonal separable tent filter of shape (channels, channels, size, size)."""
    if size < 2:
        raise ConfigurationError("bilinear kernel size must be >= 2")
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    tent = 1.0 - np.abs(np.arange(size) - center) / factor
    kernel = np.zeros((channels, channels, size, size))
    kernel[np.arange(channels), np.arange(channels)] = np.outer(tent, tent)
    return kernel


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def pool_output_size(size, window, stride, ceil_mode=False):
    if window > size:
        raise DimensionError(f"pool window {window} exceeds spatial size {size}")
    span = size - window
    if ceil_mode:
        return -(-span // stride) + 1
    if span % stride:
        raise DimensionError(
            f"spatial size {size} incompatible with window {window} / stride {stride} (use ceil_mode)"
        )
    return span // stride + 1


def maxpool(x, window=2, stride=2, ceil_mode=False):
    """Max pooling; returns (output, argmax) where argmax holds flat row-major input offsets.

    Ties go to the first element of the window in row-major order.  With
    ``ceil_mode`` the last windows may hang over the edge (Caffe convention);
    the overhang never wins.
    """
    x = check_tensor(x)
    n, c, h, w = x.shape
    ho = pool_output_size(h, window, stride, ceil_mode)
    wo = pool_output_size(w, window, stride, ceil_mode)
    hp = (ho - 1) * stride + window
    wp = (wo - 1) * stride + window
    xp = x
    if hp > h or wp > w:
        xp = np.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), constant_values=-np.inf)
    win = _windows(xp, window, window, stride).reshape(n, c, ho, wo, window * window)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // window
    cols = np.arange(wo)[None, :] * stride + local % window
    return np.ascontiguousarray(out), rows * w + cols


def maxpool_backward(dout, argmax, input_shape):
    n, c, h, w = input_shape
    planes = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    flat = np.bincount((argmax + planes).ravel(), weights=dout.ravel(), minlength=n * c * h * w)
    return flat.reshape(input_shape).astype(dout.dtype, copy=False)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running moments of a batch-norm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def identity(cls, channels, eps=1e-5, momentum=0.9):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps, momentum)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str = field(default="train")


def batchnorm(x, state, mode="train"):
    """Normalize each channel, then scale by gamma and shift by beta.

    In train mode the batch moments are used and the running moments in
    ``state`` are updated in place; in infer mode only the running moments are
    read.  Returns (output, cache).
    """
    x = check_tensor(x)
    n, c, h, w = x.shape
    if state.gamma.shape != (c,):
        raise DimensionError(f"channel axis mismatch: input has {c} channels, batchnorm has {state.gamma.shape[0]}")
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ValidationError("batchnorm train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[:] = m * state.running_mean + (1 - m) * mean
        state.running_var[:] = m * state.running_var + (1 - m) * var * count / (count - 1)
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]
    return out, BatchNormCache(xhat, inv_std, state.gamma.copy(), mode)


def batchnorm_backward(dout, cache):
    """Gradients (dx, dgamma, dbeta) of ``batchnorm``."""
    dgamma = (dout * cache.xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * cache.gamma[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if cache.mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * cache.xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - cache.xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


def softmax(scores, axis=1):
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(scores, labels, reduction="mean", ignore_index=IGNORE):
    """Per-pixel softmax cross-entropy.

    ``labels`` is (N, H, W) of class ids, ``ignore_index`` marking void pixels.
    With reduction "mean" the loss is averaged over non-ignored pixels, with
    "sum" it is the raw sum.  Returns (loss, dscores).
    """
    scores = check_tensor(scores, "scores")
    labels = np.asarray(labels)
    n, k, h, w = scores.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} does not match scores (N, H, W) = {(n, h, w)}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValidationError(f"labels must be in [0, {k}) or {ignore_index}, found {np.unique(labels[bad])}")
    safe = np.where(valid, labels, 0).astype(np.intp)

    z = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = (log_norm - picked) * valid

    grad = softmax(scores)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
    grad *= valid[:, None]

    if reduction == "mean":
        count = max(int(valid.sum()), 1)
        return float(nll.sum() / count), grad / count
    if reduction == "sum":
        return float(nll.sum()), grad
    raise ConfigurationError(f"unknown reduction {reduction!r}")
