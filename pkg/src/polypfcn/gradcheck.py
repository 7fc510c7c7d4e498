"""Central-difference gradient checking for the hand-written backward passes."""
from dataclasses import dataclass

import numpy as np

from . import network, ops


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple
    checked: int
    skipped: int


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor): a sign-flipped gradient scores 2.

    The floor keeps structurally zero gradients (a bias feeding batch norm)
    from turning roundoff into large relative errors.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(fn, x, analytic, rel_step=1e-3, n_samples=None, rng=None, smooth=None, min_scale=1e-2):
    """Compare ``analytic`` (d fn / d x) against central differences of the scalar ``fn``.

    The step for coordinate i is ``rel_step * max(|x_i|, min_scale)``.  ``n_samples``
    limits the probe to a random subset of coordinates.  ``smooth(x_plus,
    x_minus)`` may veto a probe that straddles a kink (relu zero, pooling
    tie); vetoed coordinates are counted in ``skipped``.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if n_samples is not None and n_samples < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, n_samples, replace=False))
    worst, worst_i, checked, skipped = 0.0, None, 0, 0
    for i in idx:
        orig = flat[i]
        h = rel_step * max(abs(orig), min_scale)
        flat[i] = orig + h
        plus = x.copy()
        f_plus = fn(x)
        flat[i] = orig - h
        minus = x.copy()
        f_minus = fn(x)
        flat[i] = orig
        if smooth is not None and not smooth(plus, minus):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        err = float(relative_error(analytic.reshape(-1)[i], numeric))
        checked += 1
        if err > worst or worst_i is None:
            worst, worst_i = err, np.unravel_index(i, x.shape)
    return GradCheckResult(worst, worst_i, checked, skipped)


# --- the layer suite ------------------------------------------------------------

def _projection(shape, rng):
    return rng.normal(size=shape)


def _probe_conv(rng, flip):
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    r = _projection((2, 4, 4, 4), rng)
    out_fn = lambda x_: ops.conv2d_forward(x_, w, b, stride=2, padding=1)
    dx, dw, _ = ops.conv2d_backward(r, x, w, stride=2, padding=1)
    res_x = grad_check(lambda x_: np.sum(out_fn(x_) * r), x, flip * dx)
    res_w = grad_check(lambda w_: np.sum(ops.conv2d_forward(x, w_, b, 2, 1) * r), w, flip * dw)
    return max(res_x.max_rel_error, res_w.max_rel_error)


def _probe_deconv(rng, flip):
    x = rng.normal(size=(2, 2, 3, 3))
    w = rng.normal(size=(2, 3, 4, 4))
    r = _projection((2, 3, 8, 8), rng)
    dx, dw = ops.conv2d_transpose_backward(r, x, w, stride=2)
    res_x = grad_check(lambda x_: np.sum(ops.conv2d_transpose(x_, w, 2) * r), x, flip * dx)
    res_w = grad_check(lambda w_: np.sum(ops.conv2d_transpose(x, w_, 2) * r), w, flip * dw)
    return max(res_x.max_rel_error, res_w.max_rel_error)


def _probe_relu(rng, flip):
    x = rng.normal(size=(2, 3, 5, 5))
    x[np.abs(x) < 0.05] += 0.1
    r = _projection(x.shape, rng)
    dx = ops.relu_backward(r, x)
    same_side = lambda p, m: np.array_equal(p > 0, m > 0)
    return grad_check(lambda x_: np.sum(ops.relu(x_) * r), x, flip * dx, smooth=same_side).max_rel_error


def _probe_maxpool(rng, flip):
    x = rng.normal(size=(2, 2, 8, 8))
    r = _projection((2, 2, 4, 4), rng)
    out, arg = ops.maxpool(x, 2, 2)
    dx = ops.maxpool_backward(r, arg, x.shape)
    same_arg = lambda p, m: np.array_equal(ops.maxpool(p, 2, 2)[1], ops.maxpool(m, 2, 2)[1])
    return grad_check(lambda x_: np.sum(ops.maxpool(x_, 2, 2)[0] * r), x, flip * dx,
                      smooth=same_arg).max_rel_error


def _probe_batchnorm(rng, flip):
    x = rng.normal(loc=1.0, scale=2.0, size=(3, 2, 4, 4))
    r = _projection(x.shape, rng)
    gamma, beta = rng.normal(size=2), rng.normal(size=2)

    def run(x_, g=gamma, b=beta):
        state = ops.BatchNormState(g, b, np.zeros(2), np.ones(2))
        return ops.batchnorm(x_, state, "train")

    out, cache = run(x)
    dx, dg, db = ops.batchnorm_backward(r, cache)
    errs = [
        grad_check(lambda x_: np.sum(run(x_)[0] * r), x, flip * dx).max_rel_error,
        grad_check(lambda g_: np.sum(run(x, g=g_)[0] * r), gamma, flip * dg).max_rel_error,
        grad_check(lambda b_: np.sum(run(x, b=b_)[0] * r), beta, flip * db).max_rel_error,
    ]
    return max(errs)


def _probe_softmax_xent(rng, flip):
    s = rng.normal(size=(2, 2, 4, 4))
    labels = rng.integers(0, 2, size=(2, 4, 4))
    labels[0, 0, 0] = ops.IGNORE
    _, g = ops.softmax_xent(s, labels)
    return grad_check(lambda s_: ops.softmax_xent(s_, labels)[0], s, flip * g).max_rel_error


def toy_fcn(rng, batchnorm=False, in_channels=3):
    """Three-stage miniature FCN used by the whole-network checks (downsample 4)."""
    L = network.LayerSpec
    layers = [
        L("conv", "conv1", in_channels, 4, kernel=3, padding=1), L("relu", "relu1"),
        L("maxpool", "pool1", kernel=2, stride=2),
        L("conv", "conv2", 4, 6, kernel=3, padding=1), L("relu", "relu2"),
        L("maxpool", "pool2", kernel=2, stride=2),
        L("conv", "fc1", 6, 8, kernel=1), L("relu", "fc1_relu"),
        L("score", "score", 8, 2, kernel=1, lr_mult=10.0, bias_lr_mult=20.0),
        L("deconv", "upscore", 2, 2, kernel=8, stride=4),
    ]
    spec = network.NetworkSpec(layers, in_channels, "toy-fcn", scale=4, width=4, fcn=True)
    params = network.init_params(spec, rng)
    # a zero scoring layer would hide every upstream gradient
    params["score.weight"] = rng.normal(size=params["score.weight"].shape)
    params["score.bias"] = rng.normal(size=2)
    params["upscore.weight"] += 0.1 * rng.normal(size=params["upscore.weight"].shape)
    if batchnorm:
        spec, params = network.add_batchnorm(spec, params)
        for name in params:
            if name.endswith(".gamma") or name.endswith(".beta"):
                params[name] = params[name] + 0.2 * rng.normal(size=params[name].shape)
    return spec, params


def _pattern(spec, params, x, mode):
    """Relu signs and pool argmaxes: the piecewise-linear region of the network at x."""
    trace = network.forward(spec, params, x, mode)
    marks = []

    def rec(records):
        for r in records:
            if r.layer.kind == "relu":
                marks.append(r.x > 0)
            elif r.layer.kind == "maxpool":
                marks.append(r.cache)
            elif r.layer.kind == "residual":
                rec(r.cache)
    rec(trace.records)
    return marks


def check_network(spec, params, x, labels, mode="train", rel_step=1e-3, n_samples=12, rng=None, flip=1.0):
    """Worst relative error over the input and a sample of every trainable tensor."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def loss(p):
        trace = network.forward(spec, p, x, mode)
        return ops.softmax_xent(trace.output, labels)[0]

    trace = network.forward(spec, params, x, mode)
    _, dscore = ops.softmax_xent(trace.output, labels)
    grads, dx = network.backward(spec, params, trace, dscore, return_input_grad=True)
    base = _pattern(spec, params, x, mode)

    def same_region(pattern):
        return len(pattern) == len(base) and all(np.array_equal(a, b) for a, b in zip(pattern, base))

    worst = 0.0
    for name in spec.trainable():
        trial = {k: v.copy() for k, v in params.items()}

        def f(value, name=name):
            trial[name] = value
            return loss(trial)

        def smooth(vp, vm, name=name):
            trial[name] = vp
            ok = same_region(_pattern(spec, trial, x, mode))
            trial[name] = vm
            ok = ok and same_region(_pattern(spec, trial, x, mode))
            trial[name] = params[name]
            return ok

        res = grad_check(f, params[name], flip * grads[name], rel_step, n_samples, rng, smooth)
        worst = max(worst, res.max_rel_error)

    smooth_x = lambda xp, xm: same_region(_pattern(spec, params, xp, mode)) and same_region(
        _pattern(spec, params, xm, mode))
    res = grad_check(
        lambda x_: ops.softmax_xent(network.forward(spec, params, x_, mode).output, labels)[0],
        x, flip * dx, rel_step, n_samples, rng, smooth_x,
    )
    return max(worst, res.max_rel_error)


def _probe_toy_fcn(rng, flip, batchnorm=False):
    spec, params = toy_fcn(rng, batchnorm=batchnorm)
    x = rng.normal(size=(2, 3, 16, 16))
    labels = rng.integers(0, 2, size=(2, 16, 16))
    return check_network(spec, params, x, labels, rng=rng, flip=flip)


PROBES = {
    "conv": _probe_conv,
    "deconv": _probe_deconv,
    "relu": _probe_relu,
    "maxpool": _probe_maxpool,
    "batchnorm": _probe_batchnorm,
    "softmax_xent": _probe_softmax_xent,
    "toy_fcn": _probe_toy_fcn,
    "toy_fcn_bn": lambda rng, flip: _probe_toy_fcn(rng, flip, batchnorm=True),
}


def run_suite(tolerance=1e-4, seed=0, fault=None):
    """Run every probe in double precision; returns rows of (name, max_rel_error, passed).

    ``fault`` names a probe whose analytic gradient is sign-flipped, to prove
    the detector fires.
    """
    rows = []
    for name, probe in PROBES.items():
        rng = np.random.default_rng(seed)
        err = probe(rng, -1.0 if name == fault else 1.0)
        rows.append((name, err, err < tolerance))
    return rows
