"""Two-phase curriculum: structural-loss training, then adversarial fine-tuning.

Batches are a pure function of ``(seed, step)``, so a run resumed from any
checkpoint replays exactly the same updates as an uninterrupted one.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .losses import LossWeights, discriminator_objective, generator_objective, overlap_weight_map, pixel_loss
from .metrics import evaluate
from .nets import (
    CeConfig,
    CeParams,
    DiscConfig,
    DiscParams,
    FeatureNetParams,
    ce_forward,
    disc_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor_core import AdamState, adam_step, backward, mul

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
SATURATION_MARGIN = 1e-3


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training aborted at step {step}: loss {value!r} is non-finite or above {DIVERGENCE_LIMIT:g}")
        self.step = step
        self.value = value


class ResumeError(ValueError):
    """A checkpoint does not fit the run it is resumed into."""


@dataclass
class TrainConfig:
    phase1_steps: int = 200
    phase2_steps: int = 40
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-5
    gamma: float = 0.01
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    steps_per_epoch: int = 10
    beta1: float = 0.5

    def __post_init__(self):
        if not (self.lr_generator >= 0 and self.lr_discriminator >= 0):
            raise ValueError("learning rates must be non-negative and finite")
        if not math.isfinite(self.lr_generator + self.lr_discriminator + self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be non-negative and learning rates finite")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("phase lengths must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def paper(cls, steps_per_epoch: int, **kw) -> "TrainConfig":
        return cls(phase1_steps=50 * steps_per_epoch, phase2_steps=10 * steps_per_epoch,
                   steps_per_epoch=steps_per_epoch, **kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps


@dataclass
class LossTrace:
    rows: list[tuple[int, int, float, float, float, float]] = field(default_factory=list)
    disc_rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    evals: list[tuple[int, float, float, float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    phase_boundary: int | None = None

    def totals(self, phase: int | None = None) -> list[float]:
        return [r[5] for r in self.rows if phase is None or r[1] == phase]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "phase", "l_pix", "l_feat_total", "l_adv", "l_total"])
            for step, phase, *vals in self.rows:
                w.writerow([step, phase, *(repr(float(v)) for v in vals)])

    def write_disc_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "l_disc", "d_real_mean", "d_fake_mean"])
            for step, *vals in self.disc_rows:
                w.writerow([step, *(repr(float(v)) for v in vals)])


def _guard(step: int, value: float) -> None:
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise NumericalAbort(step, value)


def generator_step(step: int, ce: CeParams, featnet, disc, weights: LossWeights, batch, opt: AdamState,
                   pixel_weights: np.ndarray) -> tuple[float, float, float, float]:
    """One Adam step on the context encoder. Returns batch means of the loss terms."""
    ce.zero_grad()
    total = None
    pix = feat = adv = 0.0
    for s in batch:
        y = ce_forward(ce, s.masked)
        terms = generator_objective(y, s.center, featnet, disc, weights, pixel_weights)
        total = terms.total if total is None else total + terms.total
        pix += terms.pixel.item()
        feat += terms.feature_total
        if terms.adversarial is not None:
            adv += terms.adversarial.item()
    n = len(batch)
    loss = mul(total, 1.0 / n)
    _guard(step, loss.item())
    backward(loss)
    params = ce.parameters()
    adam_step(params, [p.grad for p in params], opt)
    if disc is not None:
        disc.zero_grad()
    return pix / n, feat / n, adv / n, loss.item()


def discriminator_step(step: int, disc: DiscParams, real: Sequence, fake: Sequence, opt: AdamState):
    """One ascent step of the discriminator on fixed real and fake patches.

    Returns ``(objective, mean D(real), mean D(fake))`` before the update.
    """
    disc.zero_grad()
    total = None
    d_real = d_fake = 0.0
    for r, f in zip(real, fake):
        obj = discriminator_objective(disc, r, f)
        total = obj if total is None else total + obj
    loss = mul(total, 1.0 / len(real))
    _guard(step, loss.item())
    backward(loss)
    for r, f in zip(real, fake):
        d_real += disc_forward(disc, r).item()
        d_fake += disc_forward(disc, f).item()
    params = disc.parameters()
    adam_step(params, [p.grad for p in params], opt)
    n = len(real)
    return loss.item(), d_real / n, d_fake / n


def new_generator_optimizer(ce: CeParams, config: TrainConfig) -> AdamState:
    return AdamState.for_params(ce.parameters(), lr=config.lr_generator, beta1=config.beta1)


def new_discriminator_optimizer(disc: DiscParams, config: TrainConfig) -> AdamState:
    return AdamState.for_params(disc.parameters(), lr=config.lr_discriminator, beta1=config.beta1)


def _pixel_map(ce: CeParams, weights: LossWeights) -> np.ndarray:
    return overlap_weight_map(ce.config.prediction_size, weights.band_width, weights.overlap_scale)


def train_phase1(dataset: Dataset, ce: CeParams, featnet: FeatureNetParams | None, weights: LossWeights,
                 config: TrainConfig, optimizer: AdamState | None = None, start_step: int = 0,
                 end_step: int | None = None, trace: LossTrace | None = None):
    """Minimize the empirical structural loss. Returns ``(ce, optimizer, trace)``."""
    optimizer = optimizer or new_generator_optimizer(ce, config)
    trace = trace or LossTrace()
    end = config.phase1_steps if end_step is None else end_step
    pmap = _pixel_map(ce, weights)
    for step in range(start_step, end):
        batch = dataset.batch(step, config.batch_size)
        pix, feat, _, total = generator_step(step, ce, featnet, None, weights, batch, optimizer, pmap)
        trace.rows.append((step, 1, pix, feat, 0.0, total))
    return ce, optimizer, trace


def train_pixel_baseline(dataset: Dataset, ce: CeParams, config: TrainConfig, band_width: int,
                         overlap_scale: float = 10.0, steps: int | None = None) -> list[float]:
    """Reference trainer for plain band-weighted pixel regression; returns the loss trace."""
    opt = new_generator_optimizer(ce, config)
    pmap = overlap_weight_map(ce.config.prediction_size, band_width, overlap_scale)
    out = []
    for step in range(config.phase1_steps if steps is None else steps):
        ce.zero_grad()
        total = None
        batch = dataset.batch(step, config.batch_size)
        for s in batch:
            term = mul(pixel_loss(ce_forward(ce, s.masked), s.center, pmap), 1.0)
            total = term if total is None else total + term
        loss = mul(total, 1.0 / len(batch))
        backward(loss)
        params = ce.parameters()
        adam_step(params, [p.grad for p in params], opt)
        out.append(loss.item())
    return out


def _check_saturation(trace: LossTrace, step: int, config: TrainConfig, window: list[tuple[float, float]]) -> None:
    if len(window) < config.steps_per_epoch:
        return
    lo, hi = SATURATION_MARGIN, 1.0 - SATURATION_MARGIN
    if all((r <= lo or r >= hi) and (f <= lo or f >= hi) for r, f in window):
        msg = f"step {step}: discriminator saturated over the last {len(window)} steps"
        trace.warnings.append(msg)
        log.warning(msg)
    window.clear()


def train_phase2(dataset: Dataset, ce: CeParams, disc: DiscParams, featnet: FeatureNetParams | None,
                 weights: LossWeights, config: TrainConfig, optimizer: AdamState | None = None,
                 disc_optimizer: AdamState | None = None, start_step: int | None = None,
                 end_step: int | None = None, trace: LossTrace | None = None):
    """Alternate one discriminator ascent step and one generator descent step per batch.

    The generator minimizes ``structural + gamma * ln(1 - D(y))`` with
    ``gamma = config.gamma``. Returns ``(ce, disc, optimizer, disc_optimizer, trace)``.
    """
    optimizer = optimizer or new_generator_optimizer(ce, config)
    disc_optimizer = disc_optimizer or new_discriminator_optimizer(disc, config)
    trace = trace or LossTrace()
    start = config.phase1_steps if start_step is None else start_step
    end = config.total_steps if end_step is None else end_step
    if trace.phase_boundary is None:
        trace.phase_boundary = config.phase1_steps
    gweights = LossWeights(weights.lambda0, dict(weights.lambda_by_tap), config.gamma, weights.overlap_scale,
                           weights.band_width, weights.normalize)
    pmap = _pixel_map(ce, weights)
    window: list[tuple[float, float]] = []
    for step in range(start, end):
        batch = dataset.batch(step, config.batch_size)
        fake = [ce_forward(ce, s.masked).detach() for s in batch]
        real = [s.center for s in batch]
        d_loss, d_real, d_fake = discriminator_step(step, disc, real, fake, disc_optimizer)
        trace.disc_rows.append((step, d_loss, d_real, d_fake))
        window.append((d_real, d_fake))
        _check_saturation(trace, step, config, window)
        pix, feat, adv, total = generator_step(step, ce, featnet, disc, gweights, batch, optimizer, pmap)
        trace.rows.append((step, 2, pix, feat, adv, total))
    return ce, disc, optimizer, disc_optimizer, trace


@dataclass
class CurriculumResult:
    ce: CeParams
    optimizer: AdamState
    disc: DiscParams | None
    disc_optimizer: AdamState | None
    trace: LossTrace
    step: int


def disc_config_for(ce_config: CeConfig) -> DiscConfig:
    if ce_config == CeConfig.paper():
        return DiscConfig.paper()
    return DiscConfig(ce_config.prediction_size, DiscConfig.desk().channels)


def curriculum(dataset: Dataset, ce_config: CeConfig, featnet: FeatureNetParams | None, weights: LossWeights,
               config: TrainConfig, checkpoint_path=None, resume: bool = False, stop_after: int | None = None,
               eval_images=None) -> CurriculumResult:
    """Phase 1 then phase 2, checkpointing every ``config.checkpoint_every`` steps.

    With ``resume`` the run continues from ``checkpoint_path``. ``stop_after``
    ends the run early at that global step, as an interruption would.
    """
    ce = disc = disc_opt = None
    opt = None
    step = 0
    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).exists():
            raise ResumeError(f"no checkpoint to resume from at {checkpoint_path}")
        try:
            ck = load_checkpoint(checkpoint_path, expect_config=ce_config)
        except Exception as exc:
            raise ResumeError(f"cannot resume from {checkpoint_path}: {exc}") from exc
        ce, opt, step, disc, disc_opt = ck.params, ck.optimizer, ck.epoch, ck.disc, ck.disc_optimizer
        if opt is None or opt.lr != config.lr_generator or opt.beta1 != config.beta1:
            raise ResumeError("checkpoint optimizer settings differ from the training config")
        if step > config.total_steps:
            raise ResumeError(f"checkpoint is at step {step}, beyond the configured {config.total_steps}")
        if step > config.phase1_steps and disc is None:
            raise ResumeError("checkpoint is inside phase 2 but holds no discriminator")
        if disc_opt is not None and disc_opt.lr != config.lr_discriminator:
            raise ResumeError("checkpoint discriminator learning rate differs from the training config")
    else:
        ce = init_params(ce_config, config.seed)
        opt = new_generator_optimizer(ce, config)

    trace = LossTrace(phase_boundary=config.phase1_steps)
    final = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    every = config.checkpoint_every

    def save(at: int) -> None:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, ce, opt, at, disc, disc_opt)

    def snapshot_eval(at: int) -> None:
        if eval_images is not None and config.eval_every and at % config.eval_every == 0:
            rep = evaluate(ce.copy(), eval_images, dataset.spec)
            trace.evals.append((at, rep.mean_l1, rep.mean_l2, rep.mean_psnr))

    while step < final:
        if step < config.phase1_steps:
            nxt = min(final, config.phase1_steps)
            if every:
                nxt = min(nxt, (step // every + 1) * every)
            train_phase1(dataset, ce, featnet, weights, config, opt, step, nxt, trace)
        else:
            if disc is None:
                disc = init_params(disc_config_for(ce_config), config.seed + 1)
                disc_opt = new_discriminator_optimizer(disc, config)
            nxt = final
            if every:
                nxt = min(nxt, (step // every + 1) * every)
            train_phase2(dataset, ce, disc, featnet, weights, config, opt, disc_opt, step, nxt, trace)
        step = nxt
        if every and step % every == 0:
            save(step)
        snapshot_eval(step)
    save(step)
    return CurriculumResult(ce, opt, disc, disc_opt, trace, step)
