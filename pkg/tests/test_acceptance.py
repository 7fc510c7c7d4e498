"""Acceptance gate: one test per headline criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
"""
import time

import numpy as np
import pytest

import conftest
from oracles import count_pixels, detection_by_rules
from polypfcn import ops
from polypfcn.checkpoint import file_digest
from polypfcn.cli import main
from polypfcn.convmatrix import conv2d_as_matrix
from polypfcn.experiments import depth_mechanism, overfit
from polypfcn.gradcheck import run_suite
from polypfcn.imageio import write_png
from polypfcn.metrics import ConfusionCounts, detection_metrics, pixel_metrics, rates
from polypfcn.network import forward, mini_fcn, output_shape, rgbd_extend
from polypfcn.sfs import CameraModel, SfSConfig, lax_friedrichs_solve, render_lambertian
from polypfcn.surfaces import SURFACES, surface


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    conftest.ACCEPTANCE.append(line)
    assert ok, line


def test_gradient_correctness():
    t0 = time.perf_counter()
    rows = run_suite(tolerance=1e-4)
    seconds = time.perf_counter() - t0
    worst = max(err for _, err, _ in rows)
    ok = all(passed for *_, passed in rows) and seconds < 60
    report("gradient check", ok, f"{len(rows)} probes, worst rel. error {worst:.2e} (< 1e-4), {seconds:.1f} s (< 60)")


def test_conv_matrix_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    while cases < 120:
        stride, k, pad = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(0, 3))
        c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ho, wo = rng.integers(1, 7, size=2)
        h, w = int((ho - 1) * stride + k - 2 * pad), int((wo - 1) * stride + k - 2 * pad)
        if h < 1 or w < 1:
            continue
        x = rng.normal(size=(2, c, h, w))
        kernel = rng.normal(size=(f, c, k, k))
        cm = conv2d_as_matrix(kernel, (h, w), stride, pad)
        worst = max(worst, np.abs(cm.apply(x) - ops.conv2d_forward(x, kernel, stride=stride, padding=pad)).max())
        if pad == 0 and k >= stride:
            y = rng.normal(size=(2, f, int(ho), int(wo)))
            worst = max(worst, np.abs(cm.apply_transpose(y) - ops.conv2d_transpose(y, kernel, stride)).max())
        cases += 1
    seconds = time.perf_counter() - t0
    ok = worst < 1e-10 and seconds < 30
    report("conv matrix equivalence", ok, f"{cases} cases, max abs error {worst:.1e} (< 1e-10), {seconds:.1f} s (< 30)")


def test_fcn_conversion_invariants():
    bad = []
    for scale in (8, 16, 32):
        spec, _ = mini_fcn("alex", scale, 4)
        for size in (64, 224, 500):
            if output_shape(spec, (1, 3, size, size)) != (1, 2, size, size):
                bad.append((scale, size))
    # run the real forward pass too at the smallest input
    spec, params = mini_fcn("alex", 32, 2, rng=np.random.default_rng(0))
    real = forward(spec, params, np.zeros((1, 3, 64, 64))).output.shape == (1, 2, 64, 64)
    rng = np.random.default_rng(1)
    exact = True
    for seed in range(5):
        spec, params = mini_fcn("alex", 8, 4, rng=np.random.default_rng(seed))
        d_spec, d_params = rgbd_extend(spec, params)
        x = rng.random((2, 3, 64, 64))
        xd = np.concatenate([x, np.zeros((2, 1, 64, 64))], axis=1)
        exact &= np.array_equal(forward(spec, params, x).records[0].out, forward(d_spec, d_params, xd).records[0].out)
    ok = not bad and real and exact
    report("FCN conversion", ok, f"9 scale/size pairs restore resolution: {not bad and real}; "
                                 f"zero-depth pre-activations bit-exact: {exact}")


@pytest.mark.parametrize("name", SURFACES)
def test_sfs_roundtrip(name):
    cam = CameraModel(f=64.0)
    inner = (slice(4, -4), slice(4, -4))
    depth, grad = surface(name, cam)
    image = render_lambertian(depth, cam, rho=1.0, grad_v=grad)
    t0 = time.perf_counter()
    field = lax_friedrichs_solve(image, cam, SfSConfig(albedo=1.0))
    seconds = time.perf_counter() - t0
    d, r = depth[inner], field.depth[inner]
    span = d.max() - d.min()
    if span > 0:
        err = np.sqrt(np.mean((r - d) ** 2)) / span
        accuracy, what = err < 0.05, f"RMSE {100 * err:.2f}% of range (< 5%)"
    else:
        # a fronto-parallel plane has zero depth range; judge relative depth instead
        err = np.abs(r / d - 1).max()
        accuracy, what = err < 0.02, f"max relative depth error {100 * err:.2f}% (< 2%)"
    ok = field.converged and field.sweeps <= 1000 and accuracy and seconds < 60
    report(f"SfS roundtrip [{name}]", ok, f"residual {field.residual:.1e} after {field.sweeps} sweep groups, "
                                        f"{what}, {seconds:.1f} s (< 60)")


def test_overfit_end_to_end():
    plain = overfit(batchnorm=False, stop_on="both")
    bn = overfit(batchnorm=True, stop_on="loss")
    ok = (plain.iu_iteration is not None and plain.iu_iteration <= 2000 and plain.seconds < 300
          and bn.loss_iteration is not None and bn.loss_iteration <= 2000)
    report("overfit", ok, f"plain IU {plain.iu:.3f} reached 0.9 at iteration {plain.iu_iteration} "
                          f"({plain.seconds:.0f} s, < 300); running-mean loss <= 0.05 at iteration "
                          f"{plain.loss_iteration} plain vs {bn.loss_iteration} with batch norm")


def test_rgbd_mechanism():
    rgbd = depth_mechanism("rgbd")
    rgb = depth_mechanism("rgb")
    ok = rgbd.test_iu >= 0.8 and rgb.test_iu < 0.6
    report("RGB-D mechanism", ok, f"held-out IU rgbd {rgbd.test_iu:.3f} (>= 0.8), rgb {rgb.test_iu:.3f} (< 0.6); "
                                  f"train IU {rgbd.train_iu:.3f} / {rgb.train_iu:.3f}")


def _disk(shape, r, c, radius):
    rr, cc = np.ogrid[:shape[0], :shape[1]]
    return (rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2


def _scene(rng):
    polyps, taken = [], np.zeros((24, 24), bool)
    for _ in range(int(rng.integers(0, 4))):
        d = _disk((24, 24), *rng.integers(3, 21, 2), rng.integers(1, 6)) & ~taken
        if d.any():
            taken |= d
            polyps.append(d)
    pred = np.zeros((24, 24), bool)
    for _ in range(int(rng.integers(0, 6))):
        pred |= _disk((24, 24), *rng.integers(0, 24, 2), rng.integers(0, 4))
    return pred, polyps


def test_metrics_oracles():
    rng = np.random.default_rng(7)
    pixel_ok = True
    for _ in range(1000):
        shape = tuple(rng.integers(1, 20, 2))
        pred, gt = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        c = pixel_metrics(pred, gt)[3]
        pixel_ok &= (c.tp, c.fp, c.fn) == count_pixels(pred, gt)
    det_ok = True
    for _ in range(500):
        pred, polyps = _scene(rng)
        c = detection_metrics(pred, polyps)[2]
        det_ok &= (c.tp, c.fp, c.fn) == detection_by_rules(pred, polyps)
    case_ok = rates(ConfusionCounts(3, 1, 2)) == (0.75, 0.6, 0.5)
    report("metrics oracles", pixel_ok and det_ok and case_ok,
           f"1000 pixel pairs exact: {pixel_ok}; 500 detection scenes exact: {det_ok}; "
           f"TP=3/FP=1/FN=2 -> (0.75, 0.6, 0.5): {case_ok}")


def test_determinism(tmp_path):
    args = ["--set", "synthetic.n=4", "--set", "synthetic.size=48", "--set", "batch_size=2",
            "--iterations", "5", "--seed", "3"]
    for run in ("a", "b"):
        assert main(["train", *args, "--out", str(tmp_path / run)]) == 0
    train_same = file_digest(tmp_path / "a" / "final.ckpt") == file_digest(tmp_path / "b" / "final.ckpt")
    cam = CameraModel(f=64.0)
    depth, grad = surface("sinusoid", cam)
    (tmp_path / "img").mkdir()
    write_png(tmp_path / "img" / "s.png", render_lambertian(depth, cam, rho=1.0, grad_v=grad))
    for run in ("sa", "sb"):
        assert main(["sfs", "--image-dir", str(tmp_path / "img"), "--out", str(tmp_path / run)]) == 0
    sfs_same = file_digest(tmp_path / "sa" / "s_depth.pgm") == file_digest(tmp_path / "sb" / "s_depth.pgm")
    report("determinism", train_same and sfs_same,
           f"train checkpoints bit-identical: {train_same}; sfs depth maps bit-identical: {sfs_same}")
