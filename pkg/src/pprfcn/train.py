"""Image-centric SGD training: WSOD bootstrap, proposal refinement, joint training."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from pprfcn.data import WeakImage, horizontal_flip
from pprfcn.model import PPRFCN
from pprfcn.numerics import sgd_momentum_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    bootstrap_epochs: int = 3
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 7
    flip: bool = True
    scale_jitter: bool = False


@dataclass
class EpochLog:
    phase: str
    epoch: int
    obj: float
    pred: float
    reg: float
    total: float


def _augment(image: WeakImage, rng, cfg: TrainConfig) -> WeakImage:
    if cfg.flip and rng.random() < 0.5:
        image = horizontal_flip(image)
    if cfg.scale_jitter:
        image = replace(image, features=(image.features * np.float32(rng.uniform(0.8, 1.2))).astype(np.float32))
    return image


def _run_epoch(model: PPRFCN, images, rng, cfg: TrainConfig, phase: str, epoch: int, with_wspp: bool) -> EpochLog:
    sums = np.zeros(4)
    for idx in rng.permutation(len(images)):
        image = _augment(images[idx], rng, cfg)
        if len(image.proposals) < 2:
            continue
        losses, _ = model.image_loss(image, rng=rng, backward=True, with_wspp=with_wspp)
        sgd_momentum_step(model.params(), cfg.lr, cfg.momentum)
        sums += (losses.obj, losses.pred, losses.reg, losses.total)
    means = sums / max(len(images), 1)
    return EpochLog(phase, epoch, *map(float, means))


def _restrict(image: WeakImage, keep) -> WeakImage:
    return replace(image, proposals=[image.proposals[i] for i in keep])


def train(model: PPRFCN, images: list[WeakImage], cfg: TrainConfig, progress=None) -> list[EpochLog]:
    """Train on weakly labelled images only.

    The WSOD head is first bootstrapped alone on the full proposal sets; a frozen
    copy of it then refines every image's proposals, and both heads train on
    the refined sets.
    """
    rng = np.random.default_rng(cfg.seed)
    history = []

    def record(entry):
        history.append(entry)
        if progress is not None:
            progress(entry)

    for epoch in range(cfg.bootstrap_epochs):
        record(_run_epoch(model, images, rng, cfg, "bootstrap", epoch, with_wspp=False))

    if cfg.bootstrap_epochs > 0:
        model.objectness_head = copy.deepcopy(model.wsod)
        for p in model.objectness_head.params():
            p.zero_grad()
            p.momentum_buffer.fill(0.0)
    refined = [_restrict(img, model.refine_proposals(img.features, img.proposals)) for img in images]
    kept = [len(img.proposals) for img in refined]
    log.info("refined proposals: mean %.1f per image (min %d)", np.mean(kept), min(kept))

    for epoch in range(cfg.epochs):
        record(_run_epoch(model, refined, rng, cfg, "main", epoch, with_wspp=True))
    return history


def write_loss_log(history: list[EpochLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "l_obj", "l_pred", "l_reg", "total"])
        for e in history:
            writer.writerow([e.phase, e.epoch, f"{e.obj:.6f}", f"{e.pred:.6f}", f"{e.reg:.6f}", f"{e.total:.6f}"])


class Timer:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start
