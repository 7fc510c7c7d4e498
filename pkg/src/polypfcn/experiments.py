"""Desk-scale end-to-end experiments on synthetic data, shared by scripts and the acceptance suite."""
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import mini_fcn, rgbd_extend
from .synthetic import make_blob_dataset
from .train import TrainConfig, mean_iu, smoothed, train_loop


@dataclass
class OverfitSettings:
    n_images: int = 20
    size: int = 64
    data_seed: int = 0
    backbone: str = "alex"
    width: int = 8
    lr: float = 3e-3
    momentum: float = 0.99
    batch_size: int = 10
    max_iterations: int = 2000
    target_iu: float = 0.9
    loss_threshold: float = 0.05  # on the 20-iteration running mean
    eval_every: int = 50
    seed: int = 0


@dataclass
class OverfitOutcome:
    batchnorm: bool
    iterations: int
    iu: float
    iu_iteration: Optional[int]  # first evaluation with IU >= target
    loss_iteration: Optional[int]  # first iteration with running-mean loss <= threshold
    seconds: float
    losses: list = field(repr=False, default_factory=list)


def overfit(settings=None, batchnorm=False, stop_on="both", log=None):
    """Train on the synthetic set and watch training-set IU and the running-mean loss.

    ``stop_on`` is "iu", "loss" or "both": training ends once those targets
    are met, or at ``max_iterations``.
    """
    s = settings or OverfitSettings()
    data = make_blob_dataset(s.n_images, s.size, seed=s.data_seed)
    spec, params = mini_fcn(s.backbone, 8, s.width, 3, batchnorm=batchnorm, rng=np.random.default_rng(s.seed))
    cfg = TrainConfig(lr=s.lr, momentum=s.momentum, batch_size=s.batch_size, iterations=s.max_iterations,
                      seed=s.seed)
    state = {"iu": 0.0, "iu_it": None, "loss_it": None}
    losses = []

    def watch(it, p, loss):
        losses.append(loss)
        if state["loss_it"] is None and len(losses) >= 20 and smoothed(losses) <= s.loss_threshold:
            state["loss_it"] = it
        if it % s.eval_every == 0 or it == s.max_iterations:
            state["iu"] = mean_iu(spec, p, data)
            if state["iu_it"] is None and state["iu"] >= s.target_iu:
                state["iu_it"] = it
            if log:
                log(f"{'bn' if batchnorm else 'plain'} iter {it:5d} loss {smoothed(losses):.4f} IU {state['iu']:.3f}")
        done_iu = state["iu_it"] is not None
        done_loss = state["loss_it"] is not None
        return {"iu": done_iu, "loss": done_loss, "both": done_iu and done_loss}[stop_on]

    t0 = time.perf_counter()
    result = train_loop(spec, params, data, cfg, watch)
    seconds = time.perf_counter() - t0
    n = len(result.losses)
    if n % s.eval_every and n != s.max_iterations:
        state["iu"] = mean_iu(spec, params, data)
    return OverfitOutcome(batchnorm, n, state["iu"], state["iu_it"], state["loss_it"], seconds, result.losses)


@dataclass
class DepthSettings:
    n_train: int = 20
    n_test: int = 20
    size: int = 64
    train_seed: int = 0
    test_seed: int = 100
    width: int = 8
    lr: float = 3e-3
    batch_size: int = 10
    iterations: int = 600
    seed: int = 0


@dataclass
class DepthOutcome:
    mode: str
    train_iu: float
    test_iu: float
    seconds: float


def depth_mechanism(mode, settings=None, log=None):
    """Train rgb or rgbd on scenes whose decoys look like polyps but lie flat in depth."""
    s = settings or DepthSettings()
    train = make_blob_dataset(s.n_train, s.size, seed=s.train_seed, ambiguous=True)
    test = make_blob_dataset(s.n_test, s.size, seed=s.test_seed, ambiguous=True)
    spec, params = mini_fcn("alex", 8, s.width, 3, rng=np.random.default_rng(s.seed))
    with_depth = mode == "rgbd"
    if with_depth:
        spec, params = rgbd_extend(spec, params)
    cfg = TrainConfig(lr=s.lr, batch_size=s.batch_size, iterations=s.iterations, with_depth=with_depth,
                      seed=s.seed)
    t0 = time.perf_counter()
    train_loop(spec, params, train, cfg, log=log)
    seconds = time.perf_counter() - t0
    return DepthOutcome(mode, mean_iu(spec, params, train, with_depth), mean_iu(spec, params, test, with_depth),
                        seconds)
