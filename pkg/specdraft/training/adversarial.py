"""
Alternating draft-head (generator) and discriminator training, driven by the frozen target.
"""
import math
import time
from enum import Enum
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt, model_validator
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from specdraft.autodiff import ops
from specdraft.autodiff.optim import Optimizer, OptimizerKind, make_optimizer
from specdraft.autodiff.tensor import Tensor, backward, no_grad, reset_tape
from specdraft.errors import GraphError, NonFiniteLossError
from specdraft.log import get_logger, write_jsonl
from specdraft.models.heads import DraftHead, HeadKind
from specdraft.models.target import TargetModel
from specdraft.training.batches import TrainBatch, batch_sampler, sample_windows, build_batch
from specdraft.training.discriminator import Discriminator, default_fc_layers
from specdraft.training.losses import (
    SaturationCounter,
    adversarial_loss,
    discriminator_loss,
    distill_loss,
    generator_loss,
)
from specdraft.util import component_rng

logger = get_logger()

USUAL_LAMBDA_RANGE = (0.05, 0.5)


class StopCriterion(str, Enum):
    nash = "nash"
    max_epochs = "max_epochs"
    divergence = "divergence"
    nonfinite = "nonfinite"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lam: float = Field(0.1, alias="lambda", ge=0.0, le=1.0)
    g_steps: NonNegativeInt = 1
    d_steps: NonNegativeInt = 1
    lr_g: PositiveFloat = 1e-4
    lr_d: PositiveFloat = 1e-4
    optimizer: OptimizerKind = OptimizerKind.adam
    max_epochs: PositiveInt = 40
    nash_window: PositiveInt = 5
    nash_band: Tuple[float, float] = (0.45, 0.55)
    nash_after_separation: bool = True
    batches_per_epoch: PositiveInt = 20
    batch_size: PositiveInt = 8
    seq_len: PositiveInt = 64
    starts_per_window: Optional[PositiveInt] = 16
    clip_norm: Optional[PositiveFloat] = 1.0
    disc_fc_layers: Optional[int] = Field(None, ge=1, le=3)
    divergence_factor: PositiveFloat = 10.0
    divergence_epochs: PositiveInt = 3
    adversarial: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check_band(self) -> "TrainConfig":
        low, high = self.nash_band
        if not 0.0 <= low <= high <= 1.0:
            raise ValueError(f"nash_band must satisfy 0 <= low <= high <= 1, got {self.nash_band}")
        return self

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.adversarial else 0.0


class EpochStats(BaseModel):
    epoch: int
    loss_g: float
    loss_d: Optional[float]
    disc_accuracy: Optional[float]
    distill: float
    adversarial: Optional[float]
    held_out_distill: Optional[float] = None
    held_out_disc_accuracy: Optional[float] = None
    saturated: int = 0
    seconds: float = 0.0


class TrainingSummary(BaseModel):
    summary: bool = True
    stop_criterion: StopCriterion
    epochs: int
    final_distill: Optional[float]
    first_distill: Optional[float]
    head_params: int
    disc_params: int
    lam: float
    seconds: float
    snapshot: Optional[dict] = None


class TrainingReport(NamedTuple):
    epochs: List[EpochStats]
    summary: TrainingSummary

    def records(self) -> List[dict]:
        return [e.model_dump(mode="json") for e in self.epochs] + [self.summary.model_dump(mode="json")]

    def write(self, output_file: Path) -> None:
        write_jsonl(self.records(), output_file)


def build_discriminator(head: DraftHead, cfg: TrainConfig) -> Optional[Discriminator]:
    """No discriminator exists when adversarial learning is off."""
    if not cfg.adversarial:
        return None
    fc_layers = cfg.disc_fc_layers or default_fc_layers(head.config.k)
    return Discriminator(
        head.config.d_model,
        head.config.vocab_size,
        fc_layers,
        component_rng(cfg.seed, "disc-init"),
        dtype=next(head.named_parameters())[1].dtype,
    )


def _flatten(batch: TrainBatch, d_logits: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    rows, positions, vocab = d_logits.shape
    hidden = Tensor(np.repeat(batch.hidden, positions, axis=0))
    q_flat = Tensor(batch.q_logits.reshape(rows * positions, vocab))
    return hidden, q_flat, ops.reshape(d_logits, (rows * positions, vocab))


def head_loss_weight(head: DraftHead, positions: int) -> float:
    """
    Medusa's logical heads each contribute their own mean loss, so the flattened mean is scaled by
    the head count. An EAGLE chain is one head.
    """
    return float(positions) if head.config.kind == HeadKind.medusa else 1.0


def disc_accuracy(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    # ties at exactly 0.5 count as half right
    real = np.where(d_real > 0.5, 1.0, np.where(d_real == 0.5, 0.5, 0.0))
    fake = np.where(d_fake < 0.5, 1.0, np.where(d_fake == 0.5, 0.5, 0.0))
    return float((real.mean() + fake.mean()) / 2)


def _check_finite(loss: Tensor, phase: str, epoch: int, batch_index: int, head: DraftHead, disc) -> None:
    value = loss.item()
    if math.isfinite(value):
        return
    snapshot = {
        "phase": phase,
        "epoch": epoch,
        "batch": batch_index,
        "loss": repr(value),
        "head_digest": head.weights_digest(),
        "disc_digest": disc.weights_digest() if disc is not None else None,
    }
    raise NonFiniteLossError(f"non-finite {phase} loss at epoch {epoch}, batch {batch_index}", snapshot)


def generator_step(
    head: DraftHead,
    disc: Optional[Discriminator],
    batch: TrainBatch,
    lam: float,
    optimizer: Optimizer,
    saturation: SaturationCounter,
    epoch: int = 0,
    batch_index: int = 0,
) -> Tuple[float, float, Optional[float]]:
    """
    One update of the head on ``L_G``; the discriminator's weights are not touched.
    Returns (L_G, distill component, adversarial component).
    """
    reset_tape()
    optimizer.zero_grad()
    if disc is not None:
        disc.requires_grad_(False)
    d_logits = head.chain_logits(Tensor(batch.hidden), batch.tokens)
    hidden, q_flat, d_flat = _flatten(batch, d_logits)
    weight = head_loss_weight(head, d_logits.shape[1])
    d_fake = disc.score(hidden, d_flat) if disc is not None and lam > 0 else None
    loss = ops.scale(generator_loss(d_fake, d_flat, q_flat, lam, saturation), weight)
    _check_finite(loss, "generator", epoch, batch_index, head, disc)
    with no_grad():
        distill = weight * distill_loss(Tensor(d_flat.data), q_flat).item()
        adversarial = weight * adversarial_loss(Tensor(d_fake.data)).item() if d_fake is not None else None
    backward(loss)
    optimizer.step()
    return loss.item(), distill, adversarial


def discriminator_step(
    head: DraftHead,
    disc: Discriminator,
    batch: TrainBatch,
    optimizer: Optimizer,
    saturation: SaturationCounter,
    epoch: int = 0,
    batch_index: int = 0,
) -> Tuple[float, float]:
    """
    One update of the discriminator on ``L_D``; the head only supplies detached draft logits.
    Returns (L_D, accuracy on this batch before the update).
    """
    reset_tape()
    optimizer.zero_grad()
    disc.requires_grad_(True)
    with no_grad():
        d_logits = head.chain_logits(Tensor(batch.hidden), batch.tokens)
    hidden, q_flat, d_flat = _flatten(batch, Tensor(d_logits.data))
    d_real = disc.score(hidden, q_flat)
    d_fake = disc.score(hidden, d_flat)
    loss = ops.scale(discriminator_loss(d_real, d_fake, saturation), head_loss_weight(head, d_logits.shape[1]))
    _check_finite(loss, "discriminator", epoch, batch_index, head, disc)
    accuracy = disc_accuracy(d_real.data, d_fake.data)
    backward(loss)
    optimizer.step()
    return loss.item(), accuracy


def evaluate(
    head: DraftHead, disc: Optional[Discriminator], batch: TrainBatch, lam: float
) -> Tuple[float, float, Optional[float], Optional[float], Optional[float]]:
    """Losses and accuracy on ``batch`` without updating anything: (L_G, distill, adversarial, L_D, accuracy)."""
    with no_grad():
        d_logits = head.chain_logits(Tensor(batch.hidden), batch.tokens)
        hidden, q_flat, d_flat = _flatten(batch, d_logits)
        weight = head_loss_weight(head, d_logits.shape[1])
        distill = weight * distill_loss(d_flat, q_flat).item()
        if disc is None:
            return distill, distill, None, None, None
        d_real = disc.score(hidden, q_flat)
        d_fake = disc.score(hidden, d_flat)
        adversarial = weight * adversarial_loss(d_fake).item()
        loss_g = weight * generator_loss(d_fake, d_flat, q_flat, lam).item()
        loss_d = weight * discriminator_loss(d_real, d_fake).item()
        return loss_g, distill, adversarial, loss_d, disc_accuracy(d_real.data, d_fake.data)


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def train_epoch(
    head: DraftHead,
    disc: Optional[Discriminator],
    target: TargetModel,
    sampler: Callable[[], TrainBatch],
    cfg: TrainConfig,
    g_optimizer: Optimizer,
    d_optimizer: Optional[Optimizer],
    epoch: int = 0,
    held_out: Optional[TrainBatch] = None,
) -> EpochStats:
    """
    Per batch: ``g_steps`` generator updates, then ``d_steps`` discriminator updates.
    """
    if not target.frozen:
        raise GraphError("the target must be frozen while draft heads train")
    if disc is not None and d_optimizer is None:
        raise GraphError("a discriminator needs its own optimizer")
    lam = cfg.effective_lambda if disc is not None else 0.0
    started = time.perf_counter()
    saturation = SaturationCounter()
    losses_g: List[float] = []
    distills: List[float] = []
    adversarials: List[float] = []
    losses_d: List[float] = []
    accuracies: List[float] = []
    batch = None
    for batch_index in range(cfg.batches_per_epoch):
        batch = sampler()
        for _ in range(cfg.g_steps):
            loss_g, distill, adversarial = generator_step(
                head, disc, batch, lam, g_optimizer, saturation, epoch, batch_index
            )
            losses_g.append(loss_g)
            distills.append(distill)
            if adversarial is not None:
                adversarials.append(adversarial)
        if disc is not None:
            for _ in range(cfg.d_steps):
                loss_d, accuracy = discriminator_step(head, disc, batch, d_optimizer, saturation, epoch, batch_index)
                losses_d.append(loss_d)
                accuracies.append(accuracy)
            disc.requires_grad_(False)
    if batch is not None and (not losses_g or (disc is not None and not accuracies)):
        loss_g, distill, adversarial, loss_d, accuracy = evaluate(head, disc, batch, lam)
        losses_g = losses_g or [loss_g]
        distills = distills or [distill]
        adversarials = adversarials or ([adversarial] if adversarial is not None else [])
        if disc is not None and not accuracies:
            losses_d, accuracies = [loss_d], [accuracy]
    stats = EpochStats(
        epoch=epoch,
        loss_g=_mean(losses_g),
        loss_d=_mean(losses_d),
        disc_accuracy=_mean(accuracies),
        distill=_mean(distills),
        adversarial=_mean(adversarials),
        saturated=saturation.count,
    )
    if held_out is not None:
        _, stats.held_out_distill, _, _, stats.held_out_disc_accuracy = evaluate(head, disc, held_out, lam)
    stats.seconds = time.perf_counter() - started
    return stats


def nash_reached(
    accuracies: List[Optional[float]], window: int, band: Tuple[float, float], after_separation: bool = False
) -> bool:
    """
    Mean accuracy over the last ``window`` epochs lies in ``band``. With ``after_separation`` the window
    only counts epochs after accuracy first left the band, so a discriminator that never learned
    cannot signal equilibrium.
    """
    if after_separation:
        left = [i for i, a in enumerate(accuracies) if a is not None and not band[0] <= a <= band[1]]
        if not left:
            return False
        accuracies = accuracies[left[0] + 1 :]
    recent = accuracies[-window:]
    if len(recent) < window or any(a is None for a in recent):
        return False
    return band[0] <= float(np.mean(recent)) <= band[1]


def diverged(losses: List[float], epochs: int, factor: float) -> bool:
    """``L_G`` rose for ``epochs`` consecutive epochs and ended ``factor`` times above where the rise began."""
    if len(losses) < epochs + 1:
        return False
    window = losses[-(epochs + 1) :]
    rising = all(b > a for a, b in zip(window[:-1], window[1:]))
    return rising and window[-1] >= factor * window[0] and window[0] > 0


def train_until_equilibrium(
    head: DraftHead,
    disc: Optional[Discriminator],
    target: TargetModel,
    corpus: np.ndarray,
    cfg: TrainConfig,
    held_out_corpus: Optional[np.ndarray] = None,
    report_file: Optional[Path] = None,
) -> TrainingReport:
    """
    Trains until the discriminator accuracy settles in ``nash_band`` over ``nash_window`` epochs,
    ``max_epochs`` is reached, or ``L_G`` diverges.
    """
    if not target.frozen:
        raise GraphError("the target must be frozen while draft heads train")
    lam = cfg.effective_lambda if disc is not None else 0.0
    if 0 < lam and not USUAL_LAMBDA_RANGE[0] <= lam <= USUAL_LAMBDA_RANGE[1]:
        logger.warning(f"lambda={lam} lies outside the usual range {USUAL_LAMBDA_RANGE}")
    positions = head.train_positions
    sampler = batch_sampler(
        target,
        corpus,
        cfg.batch_size,
        cfg.seq_len,
        positions,
        component_rng(cfg.seed, "head-batches"),
        cfg.starts_per_window,
    )
    held_out = None
    if held_out_corpus is not None and held_out_corpus.size >= min(cfg.seq_len, target.config.max_seq_len):
        held_out_rng = component_rng(cfg.seed, "held-out")
        windows = sample_windows(held_out_corpus, cfg.batch_size, min(cfg.seq_len, target.config.max_seq_len), held_out_rng)
        held_out = build_batch(target, windows, positions, held_out_rng, cfg.starts_per_window)
    g_optimizer = make_optimizer(cfg.optimizer, head.trainable_parameters(), cfg.lr_g, cfg.clip_norm)
    d_optimizer = None
    if disc is not None:
        disc.requires_grad_(True)
        d_optimizer = make_optimizer(cfg.optimizer, disc.trainable_parameters(), cfg.lr_d, cfg.clip_norm)
        disc.requires_grad_(False)
    digest_before = target.weights_digest()
    started = time.perf_counter()
    history: List[EpochStats] = []
    criterion = StopCriterion.max_epochs
    snapshot = None
    with logging_redirect_tqdm(loggers=[logger]):
        for epoch in tqdm(range(cfg.max_epochs), unit="epoch"):
            try:
                stats = train_epoch(head, disc, target, sampler, cfg, g_optimizer, d_optimizer, epoch, held_out)
            except NonFiniteLossError as err:
                logger.error(f"{err}; stopping")
                criterion, snapshot = StopCriterion.nonfinite, err.snapshot
                break
            history.append(stats)
            logger.info(
                f"epoch {epoch}: L_G {stats.loss_g:.4f} distill {stats.distill:.4f}"
                + (f" L_D {stats.loss_d:.4f} disc acc {stats.disc_accuracy:.3f}" if stats.loss_d is not None else "")
            )
            if disc is not None and nash_reached(
                [s.disc_accuracy for s in history], cfg.nash_window, cfg.nash_band, cfg.nash_after_separation
            ):
                criterion = StopCriterion.nash
                break
            if diverged([s.loss_g for s in history], cfg.divergence_epochs, cfg.divergence_factor):
                logger.warning(f"L_G diverged at epoch {epoch}; stopping")
                criterion = StopCriterion.divergence
                break
    head.requires_grad_(True)
    if target.weights_digest() != digest_before:
        raise GraphError("target weights changed during draft-head training")
    summary = TrainingSummary(
        stop_criterion=criterion,
        epochs=len(history),
        final_distill=history[-1].distill if history else None,
        first_distill=history[0].distill if history else None,
        head_params=head.param_count(),
        disc_params=sum(p.size for _, p in disc.named_parameters()) if disc is not None else 0,
        lam=lam,
        seconds=time.perf_counter() - started,
        snapshot=snapshot,
    )
    logger.info(f"Head training stopped after {summary.epochs} epoch(s): {criterion}")
    report = TrainingReport(history, summary)
    if report_file is not None:
        report.write(report_file)
    return report
