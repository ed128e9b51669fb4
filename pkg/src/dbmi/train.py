"""Amortized bridge-matching training over joint (v=1) and deranged (v=0) couplings."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Coupling, NumericError, PairBatch, ValidationError, make_rng, permute_coupling
from .model import (
    Checkpoint,
    LossBatch,
    ModelConfig,
    TransitionModel,
    adam_init,
    adam_step,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 512
    m_train: int = 1
    lr: float = 3e-4
    ce_weight: float = 0.0
    seed: int = 0
    eval_every: int = 0
    ema_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (the v=0 batch is a derangement)")
        if self.m_train < 1 or self.epochs < 0:
            raise ValidationError("m_train must be >= 1 and epochs >= 0")
        if self.lr <= 0 or self.ce_weight < 0:
            raise ValidationError("lr must be positive and ce_weight non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epoch_loss_v0: list = field(default_factory=list)
    epoch_loss_v1: list = field(default_factory=list)
    steps: int = 0
    epochs_done: int = 0
    wall_clock: float = 0.0
    checkpoint_path: str | None = None


def sample_time_indices(N: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Time index of the conditioning point, uniform on ``0..N`` (target step ``n + 1``)."""
    return rng.integers(0, N + 1, size=K)


def build_batch(model: TransitionModel, x0, x1, n, m_train: int, rng: np.random.Generator) -> LossBatch:
    """Loss tuples for both couplings of one minibatch of joint pairs.

    The v=0 endpoints are a fresh derangement of ``x1``; both couplings share
    the per-pair time indices ``n``.  Yields ``2 * K * m_train`` tuples.
    """
    joint = PairBatch(x0, x1, Coupling.JOINT)
    ind = permute_coupling(joint, rng)
    parts = []
    for pairs in (ind, joint):
        for _ in range(m_train):
            x_t = model.tables.sample_bridge(n, pairs.x0, pairs.x1, rng)
            parts.append(LossBatch(x_t, pairs.x0, pairs.x1, n, np.full(len(n), int(pairs.coupling))))
    return LossBatch.concat(parts)


def train(
    x0,
    x1,
    model_config: ModelConfig,
    config: TrainConfig,
    resume: Checkpoint | None = None,
    checkpoint_path=None,
    log_path=None,
    callback: Callable | None = None,
):
    """Run ``config.epochs`` epochs (counting epochs already done in ``resume``).

    Each epoch reshuffles the dataset and walks it in minibatches of
    ``batch_size`` (a trailing partial batch is dropped).  Every random draw of
    epoch ``e`` comes from the substream ``(seed, "train", e)``, so resuming
    from a checkpoint continues exactly like an uninterrupted run.

    With ``ema_decay > 0`` an exponential moving average of the weights is
    kept (decay warmed up as ``min(decay, (1 + t) / (10 + t))``) and stored in
    the checkpoint for evaluation.  Returns ``(checkpoint, report)``.
    """
    x0 = model_config.space.validate(x0)
    x1 = model_config.space.validate(x1)
    K = config.batch_size
    if len(x0) != len(x1) or len(x0) < K:
        raise ValidationError(f"dataset needs at least batch_size={K} pairs, got {len(x0)}")
    model = TransitionModel(model_config)
    N = model_config.N

    if resume is not None:
        if resume.config != model_config:
            raise ValidationError("checkpoint was trained with a different model config")
        params = resume.params
        opt = resume.opt_state or adam_init(params, config.lr)
        start = int(resume.meta.get("epochs_done", 0))
        ema = resume.ema
    else:
        params = model.init_params(make_rng(config.seed, "init"))
        opt = adam_init(params, config.lr)
        start = 0
        ema = None
    if config.ema_decay and ema is None:
        ema = {k: p.copy() for k, p in params.items()}

    report = TrainReport(epochs_done=start, steps=opt.step)
    log_file = None
    writer = None
    if log_path is not None:
        new = resume is None or not Path(log_path).exists()
        log_file = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(log_file, delimiter="\t")
        if new:
            writer.writerow(["step", "epoch", "loss_v0", "loss_v1"])

    t_start = time.perf_counter()
    try:
        for epoch in range(start, config.epochs):
            rng = make_rng(config.seed, "train", epoch)
            order = rng.permutation(len(x0))
            sums = np.zeros(2)
            n_batches = len(x0) // K
            for b in range(n_batches):
                idx = order[b * K : (b + 1) * K]
                n = sample_time_indices(N, K, rng)
                batch = build_batch(model, x0[idx], x1[idx], n, config.m_train, rng)
                _, terms, grads = model.loss_and_grad(params, batch, config.ce_weight)
                # objective sums the two couplings, each averaged over K * M tuples
                grads = {k: 2.0 * g for k, g in grads.items()}
                params, opt = adam_step(params, opt, grads)
                if config.ema_decay:
                    d = min(config.ema_decay, (1.0 + opt.step) / (10.0 + opt.step))
                    ema = {k: d * ema[k] + (1.0 - d) * params[k] for k in params}
                l0 = float(terms[batch.v == 0].mean())
                l1 = float(terms[batch.v == 1].mean())
                if not (np.isfinite(l0) and np.isfinite(l1)):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {opt.step}")
                sums += (l0, l1)
                if writer is not None:
                    writer.writerow([opt.step, epoch, repr(l0), repr(l1)])
            report.epoch_loss_v0.append(sums[0] / n_batches)
            report.epoch_loss_v1.append(sums[1] / n_batches)
            report.epochs_done = epoch + 1
            report.steps = opt.step
            log.info("epoch %d: loss_v0=%.5f loss_v1=%.5f", epoch, *(sums / n_batches))
            if callback is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
                callback(epoch + 1, ema if ema is not None else params)
    finally:
        if log_file is not None:
            log_file.close()
    report.wall_clock = time.perf_counter() - t_start

    meta = {"epochs_done": report.epochs_done, "train_config": config.to_dict()}
    ckpt = Checkpoint(model_config, params, opt, meta, ema)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
        report.checkpoint_path = str(checkpoint_path)
    return ckpt, report
