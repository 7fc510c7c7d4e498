"""Fixed-learning-rate SGD training of a segmentation network on a list of samples."""
import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import assemble_batch, random_flip, sample_patch
from .errors import DivergenceError, NonFiniteGradientError, ValidationError
from .metrics import argmax_segmentation, pixel_metrics
from .network import backward, forward
from .ops import softmax_xent
from .optim import SGD


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.99
    batch_size: int = 20
    iterations: int = 1000
    patch_size: Optional[int] = None  # None: whole images
    flip: bool = True
    vertical_flip: bool = False
    with_depth: bool = False
    seed: int = 0
    reduction: str = "mean"
    checkpoint_every: int = 0  # 0: only the final checkpoint
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValidationError("batch_size must be >= 1 and iterations >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ValidationError(f"unknown reduction {self.reduction!r}")

    def digest(self):
        # where outputs go does not change what is computed
        d = {k: v for k, v in asdict(self).items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list
    stopped_early: bool = False


class BatchStream:
    """Seeded sequence of augmented batches; the order depends only on the seed."""

    def __init__(self, samples, config):
        if not samples:
            raise ValidationError("training set is empty")
        self.samples = samples
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    def next(self):
        cfg = self.config
        n = len(self.samples)
        idx = self.rng.permutation(n)[:cfg.batch_size] if cfg.batch_size <= n \
            else self.rng.integers(0, n, cfg.batch_size)
        batch = []
        for i in idx:
            s = self.samples[i]
            if cfg.flip:
                s = random_flip(s, self.rng, cfg.vertical_flip)
            if cfg.patch_size:
                s = sample_patch(s, cfg.patch_size, self.rng)
            batch.append(s)
        return assemble_batch(batch, cfg.with_depth)


def _snapshot(d):
    return {k: v.copy() for k, v in d.items()}


def train_loop(spec, params, samples, config, callback: Optional[Callable] = None, log=None):
    """Train ``params`` in place; returns a TrainResult.

    ``callback(iteration, params, loss)`` runs after every step; returning True
    stops training early.  On a non-finite loss or gradient a checkpoint of
    the last parameters that produced a finite loss is written (when an output
    directory is configured) and DivergenceError is raised.
    """
    opt = SGD(config.lr, config.momentum, spec.lr_mults())
    stream = BatchStream(samples, config)
    trainable = set(spec.trainable())
    out = Path(config.out_dir) if config.out_dir else None
    losses = []
    writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])

    def ckpt(it, p=None, v=None):
        return Checkpoint(spec, p if p is not None else params, v if v is not None else opt.velocity,
                          it, config.digest())

    stopped = False
    try:
        if out:
            save_checkpoint(ckpt(0), out / "iter_000000.ckpt")
        for it in range(1, config.iterations + 1):
            x, labels = stream.next()
            prev = (_snapshot(params), _snapshot(opt.velocity))
            trace = forward(spec, params, x, mode="train")
            loss, dscores = softmax_xent(trace.output, labels, reduction=config.reduction)
            try:
                if not np.isfinite(loss):
                    raise NonFiniteGradientError(f"loss is {loss}")
                grads = backward(spec, params, trace, dscores)
                opt.step(params, {k: g for k, g in grads.items() if k in trainable})
            except NonFiniteGradientError as exc:
                last = None
                if out:
                    last = save_checkpoint(ckpt(it - 1, *prev), out / "last_finite.ckpt")
                raise DivergenceError(f"training diverged at iteration {it}: {exc}", it, last) from exc
            losses.append(float(loss))
            if writer:
                writer.writerow([it, repr(float(loss))])
            if log and (it % 50 == 0 or it == 1):
                log(f"iter {it:5d} loss {loss:.5f}")
            if out and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(ckpt(it), out / f"iter_{it:06d}.ckpt")
            if callback is not None and callback(it, params, float(loss)):
                stopped = True
                break
    finally:
        if writer:
            fh.close()
    final = ckpt(len(losses))
    if out:
        save_checkpoint(final, out / "final.ckpt")
    return TrainResult(final, losses, stopped)


def predict(spec, params, samples, with_depth=False, batch_size=8):
    """Binary masks from infer-mode forward passes."""
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        by_shape = {}
        for j, s in enumerate(chunk):
            by_shape.setdefault(s.shape, []).append(j)
        out = [None] * len(chunk)
        for js in by_shape.values():
            x, _ = assemble_batch([chunk[j] for j in js], with_depth)
            scores = forward(spec, params, x, mode="infer").output
            for j, sc in zip(js, scores):
                out[j] = argmax_segmentation(sc)
        preds.extend(out)
    return preds


def mean_iu(spec, params, samples, with_depth=False):
    """Mean per-image IU (images where it is undefined are skipped)."""
    ius = []
    for s, p in zip(samples, predict(spec, params, samples, with_depth)):
        iu = pixel_metrics(p, s.union)[2]
        if iu is not None:
            ius.append(iu)
    return float(np.mean(ius)) if ius else 0.0


def smoothed(losses, window=20):
    if len(losses) < window:
        return float(np.mean(losses)) if losses else float("inf")
    return float(np.mean(losses[-window:]))
