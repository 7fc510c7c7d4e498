"""Command-line entry point: train, eval, sfs, gradcheck, report (and synth for demo data).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 a check failed.  ``POLYPFCN_THREADS`` sets the worker count
for per-image parallelism in eval and sfs.
"""
import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dataset
from .checkpoint import load_checkpoint
from .config import load_config
from .errors import ConfigurationError, DataError, DivergenceError, ValidationError
from .imageio import read_gray, write_pgm16
from .metrics import aggregate_report, argmax_segmentation, evaluate_image
from .network import forward, mini_fcn, rgbd_extend
from .sfs import CameraModel, SfSConfig, depth_to_channel, lax_friedrichs_solve
from .synthetic import make_blob_dataset
from .train import TrainConfig, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4, 5
THREADS_ENV = "POLYPFCN_THREADS"
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def workers():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer")


def _echo(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())


def _camera(cfg):
    cam = cfg.camera
    return CameraModel(cam.focal, tuple(cam.light_offset), working_distance=cam.working_distance)


def _sfs_config(cfg):
    s = cfg.sfs
    return SfSConfig(albedo=s.albedo, max_sweeps=s.max_sweeps, tolerance=s.tolerance, boundary=s.boundary)


def sfs_depth_channel(image, cam, sfs_cfg):
    """Normalized log-depth channel recovered from an RGB image by shape from shading."""
    field = lax_friedrichs_solve(image.mean(axis=0), cam, sfs_cfg)
    return depth_to_channel(field.v), field


def load_samples(cfg, require_depth=False):
    """Dataset (or the synthetic set) after resizing, filtering and optional SfS depth."""
    if cfg.data_root:
        layout = dataset.Layout.from_yaml(cfg.layout) if cfg.layout else dataset.Layout()
        manifest = dataset.load_dataset(cfg.data_root, layout)
        for line in manifest.skipped:
            print(f"skipped: {line}", file=sys.stderr)
        samples = dataset.load_samples(manifest)
    else:
        s = cfg.synthetic
        samples = make_blob_dataset(s.n, s.size, s.seed, s.ambiguous, s.max_polyps)
    if cfg.polyp_frames_only:
        samples = dataset.filter_polyp_frames(samples)
    if cfg.resize:
        samples = [dataset.resize_sample(s, cfg.resize) for s in samples]
    if require_depth and cfg.depth_source == "sfs":
        cam, scfg = _camera(cfg), _sfs_config(cfg)
        samples = [s.replace(s.image, s.masks, sfs_depth_channel(s.image, cam, scfg)[0]) for s in samples]
    if not samples:
        raise DataError("no samples to work on")
    return samples


def build_network(cfg, in_channels=None):
    rng = np.random.default_rng(cfg.seed)
    variant = "residual" if cfg.variant == "residual" else cfg.backbone
    spec, params = mini_fcn(variant, cfg.scale, cfg.width, 3, batchnorm=cfg.variant == "bn", rng=rng,
                            learnable_deconv=cfg.learnable_deconv)
    if cfg.input_mode == "rgbd":
        spec, params = rgbd_extend(spec, params)
    return spec, params


# ---------------------------------------------------------------- commands

def cmd_train(cfg):
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    with_depth = cfg.input_mode == "rgbd"
    samples = load_samples(cfg, require_depth=with_depth)
    spec, params = build_network(cfg)
    tcfg = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size, iterations=cfg.iterations,
                       patch_size=cfg.patch_size, flip=cfg.flip, vertical_flip=cfg.vertical_flip,
                       with_depth=with_depth, seed=cfg.seed, reduction=cfg.reduction,
                       checkpoint_every=cfg.checkpoint_every, out_dir=str(out))
    result = train_loop(spec, params, samples, tcfg, log=print)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {len(result.losses)} iterations; final loss {last:.6f}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _predict(spec, params, sample, with_depth):
    x, _ = dataset.assemble_batch([sample], with_depth)
    scores = forward(spec, params, x, mode="infer").output
    return argmax_segmentation(scores), scores[0]


def cmd_eval(cfg):
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    spec = params = None
    with_depth = cfg.input_mode == "rgbd"
    if cfg.prediction == "model":
        if not cfg.checkpoint:
            raise ConfigurationError("eval needs a checkpoint (set checkpoint=...)")
        ckpt = load_checkpoint(cfg.checkpoint)
        spec, params = ckpt.spec, ckpt.params
        expected = 4 if with_depth else 3
        if spec.in_channels != expected:
            raise ConfigurationError(
                f"checkpoint expects {spec.in_channels}-channel input but input_mode={cfg.input_mode!r} "
                f"provides {expected}; set input_mode to {'rgbd' if spec.in_channels == 4 else 'rgb'}")
    samples = load_samples(cfg, require_depth=with_depth)

    def one(s):
        if cfg.prediction == "oracle":
            pred = s.union
        elif cfg.prediction == "empty":
            pred = np.zeros(s.shape, dtype=np.uint8)
        else:
            pred = _predict(spec, params, s, with_depth)[0]
        return evaluate_image(s.id, pred, s.union, s.masks, cfg.detection_rule)

    with ThreadPoolExecutor(workers()) as pool:
        results = list(pool.map(one, samples))
    report = aggregate_report(results)
    with open(out / "per_image.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.rows())
    summary = report.summary(f"{cfg.prediction} predictions on {len(samples)} images")
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def _sfs_one(path, cam, scfg, out):
    image = read_gray(path)
    field = lax_friedrichs_solve(image, cam, scfg)
    channel = depth_to_channel(field.v)
    stem = Path(path).stem
    write_pgm16(out / f"{stem}_depth.pgm", np.round(channel * 65535))
    lines = [f"image {path}", f"converged {int(field.converged)}", f"degenerate {int(field.degenerate)}",
             f"residual {field.residual!r}", f"sweep_groups {field.sweeps}", f"albedo {field.albedo!r}",
             f"log_depth_min {float(field.v.min())!r}", f"log_depth_max {float(field.v.max())!r}",
             "encoding: 16-bit value / 65535 = (log depth - min) / (max - min)"]
    (out / f"{stem}_depth.txt").write_text("\n".join(lines) + "\n")
    return stem, field


def cmd_sfs(cfg):
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    src = Path(cfg.image_dir or (Path(cfg.data_root) / "images" if cfg.data_root else ""))
    if not cfg.image_dir and not cfg.data_root:
        raise ConfigurationError("sfs needs image_dir (or data_root)")
    if not src.is_dir():
        raise DataError(f"image directory {src} does not exist")
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    cam, scfg = _camera(cfg), _sfs_config(cfg)
    with ThreadPoolExecutor(workers()) as pool:
        results = list(pool.map(lambda p: _sfs_one(p, cam, scfg, out), paths))
    rows = [["image", "converged", "degenerate", "residual", "sweep_groups", "albedo"]]
    for stem, f in results:
        rows.append([stem, int(f.converged), int(f.degenerate), repr(f.residual), f.sweeps, repr(f.albedo)])
    with open(out / "convergence.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    n_conv = sum(f.converged for _, f in results)
    print(f"sfs: {n_conv}/{len(results)} images converged; depth maps in {out}")
    for stem, f in results:
        if not f.converged:
            print(f"  {stem}: not converged (residual {f.residual:.3g}{', degenerate' if f.degenerate else ''})")
    return EXIT_OK


def cmd_gradcheck(cfg, fault=None):
    from .gradcheck import run_suite

    out = Path(cfg.out_dir)
    _echo(cfg, out)
    rows = run_suite(seed=cfg.seed, fault=fault)
    lines = [f"{'layer':<16} {'max rel error':>14}  result"]
    for name, err, ok in rows:
        lines.append(f"{name:<16} {err:14.3e}  {'pass' if ok else 'FAIL'}")
    text = "\n".join(lines)
    (out / "gradcheck.txt").write_text(text + "\n")
    print(text)
    failed = [name for name, _, ok in rows if not ok]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_report(cfg):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(cfg.out_dir)
    _echo(cfg, out)
    run = Path(cfg.run_dir) if cfg.run_dir else None
    made = []
    if run and (run / "loss.csv").exists():
        its, losses = [], []
        with open(run / "loss.csv") as fh:
            for row in csv.DictReader(fh):
                its.append(int(row["iteration"]))
                losses.append(float(row["loss"]))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(its, losses, lw=0.8, label="loss")
        if len(losses) >= 20:
            ax.plot(its[19:], np.convolve(losses, np.ones(20) / 20, mode="valid"), lw=1.5, label="20-iter mean")
        ax.set_xlabel("iteration")
        ax.set_ylabel("cross-entropy")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curve.png", dpi=120)
        plt.close(fig)
        made.append("loss_curve.png")
    ckpt_path = cfg.checkpoint or (str(run / "final.ckpt") if run and (run / "final.ckpt").exists() else None)
    if ckpt_path:
        ckpt = load_checkpoint(ckpt_path)
        with_depth = ckpt.spec.in_channels == 4
        samples = load_samples(cfg, require_depth=with_depth)[:cfg.panels]
        fig, axes = plt.subplots(len(samples), 3, figsize=(7.5, 2.5 * len(samples)), squeeze=False)
        for row, s in zip(axes, samples):
            pred, scores = _predict(ckpt.spec, ckpt.params, s, with_depth)
            e = np.exp(scores - scores.max(axis=0))
            row[0].imshow(s.image.transpose(1, 2, 0))
            row[1].imshow(e[1] / e.sum(axis=0), cmap="magma", vmin=0, vmax=1)
            row[2].imshow(pred, cmap="gray")
            row[2].contour(s.union, levels=[0.5], colors="c", linewidths=0.8)
            for ax, title in zip(row, ("image", "polyp score", "mask (cyan: truth)")):
                ax.set_title(title, fontsize=8)
                ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / "panels.png", dpi=120)
        plt.close(fig)
        made.append("panels.png")
    if not made:
        raise DataError("nothing to report: give run_dir with loss.csv and/or a checkpoint")
    print("wrote " + ", ".join(str(out / m) for m in made))
    return EXIT_OK


def cmd_synth(cfg):
    out = Path(cfg.out_dir)
    s = cfg.synthetic
    samples = make_blob_dataset(s.n, s.size, s.seed, s.ambiguous, s.max_polyps)
    dataset.write_samples(samples, out, dataset.Layout(depth_dir="depth"))
    (out / "layout.yaml").write_text("image_dir: images\nmask_dir: masks\nimage_glob: '*.png'\n"
                                     "mask_pattern: '{stem}_*.png'\ndepth_dir: depth\n")
    print(f"wrote {len(samples)} synthetic samples to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sfs": cmd_sfs, "gradcheck": cmd_gradcheck,
            "report": cmd_report, "synth": cmd_synth}

FLAG_KEYS = {"out": "out_dir", "seed": "seed", "iterations": "iterations", "data": "data_root",
             "checkpoint": "checkpoint", "image_dir": "image_dir", "run_dir": "run_dir", "lr": "lr",
             "input_mode": "input_mode", "variant": "variant", "prediction": "prediction"}


def parser():
    p = argparse.ArgumentParser(prog="polypfcn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted for nested keys); repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data", help="dataset root (omit for the synthetic set)")
    p.add_argument("--checkpoint")
    p.add_argument("--image-dir", dest="image_dir")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--input-mode", dest="input_mode", choices=["rgb", "rgbd"])
    p.add_argument("--variant", choices=["plain", "bn", "residual"])
    p.add_argument("--prediction", choices=["model", "oracle", "empty"])
    p.add_argument("--fault", help=argparse.SUPPRESS)  # gradcheck test hook: sign-flip this probe
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    flags = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
    try:
        cfg = load_config(args.config, [*args.set, flags], command=args.command)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.fault)
        return COMMANDS[args.command](cfg)
    except (ConfigurationError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        where = f"; last finite checkpoint {exc.checkpoint}" if exc.checkpoint else ""
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
