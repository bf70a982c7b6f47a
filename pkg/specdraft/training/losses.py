from typing import Optional

import numpy as np

from specdraft.autodiff import ops
from specdraft.autodiff.tensor import Tensor, no_grad
from specdraft.errors import ShapeError

PROB_EPS = 1e-7


class SaturationCounter:
    """Counts discriminator probabilities that had to be clamped away from 0 or 1."""

    def __init__(self) -> None:
        self.count = 0

    def observe(self, probs: Tensor, eps: float = PROB_EPS) -> None:
        self.count += int(np.count_nonzero((probs.data < eps) | (probs.data > 1 - eps)))


def _flatten_rows(x: Tensor) -> Tensor:
    return ops.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Mean next-token cross-entropy of ``logits`` (..., V) against integer ``targets`` (...).
    """
    targets = np.asarray(targets).reshape(-1)
    flat = _flatten_rows(logits)
    if flat.shape[0] != targets.size:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    one_hot = np.zeros(flat.shape, dtype=flat.dtype)
    one_hot[np.arange(targets.size), targets] = 1
    picked = ops.sum(ops.mul(ops.log_softmax(flat), Tensor(one_hot)))
    return ops.scale(picked, -1.0 / targets.size)


def distill_loss(d_logits: Tensor, q_logits: Tensor) -> Tensor:
    """
    KL(softmax(q) || softmax(d)), averaged over positions. ``q_logits`` is treated as a constant target.
    """
    if d_logits.shape != q_logits.shape:
        raise ShapeError("distill_loss", d_logits.shape, q_logits.shape)
    d_rows = _flatten_rows(d_logits)
    with no_grad():
        log_q = ops.log_softmax(_flatten_rows(Tensor(q_logits.data)))
    q_probs = Tensor(np.exp(log_q.data))
    log_ratio = ops.add(log_q, ops.scale(ops.log_softmax(d_rows), -1.0))
    per_row = ops.sum(ops.mul(q_probs, log_ratio), axis=-1)
    return ops.mean(per_row)


def _clamped_log(probs: Tensor, saturation: Optional[SaturationCounter]) -> Tensor:
    if saturation is not None:
        saturation.observe(probs)
    return ops.log(ops.clip(probs, PROB_EPS, 1 - PROB_EPS))


def discriminator_loss(
    d_real: Tensor, d_fake: Tensor, saturation: Optional[SaturationCounter] = None
) -> Tensor:
    """
    ``-E[log D(real)] - E[log(1 - D(fake))]``.
    """
    real_term = ops.mean(_clamped_log(d_real, saturation))
    one = Tensor(np.ones(d_fake.shape, dtype=d_fake.dtype))
    fake_term = ops.mean(_clamped_log(ops.add(one, ops.scale(d_fake, -1.0)), saturation))
    return ops.scale(ops.add(real_term, fake_term), -1.0)


def adversarial_loss(d_fake: Tensor, saturation: Optional[SaturationCounter] = None) -> Tensor:
    """Non-saturating generator objective ``-E[log D(fake)]``."""
    return ops.scale(ops.mean(_clamped_log(d_fake, saturation)), -1.0)


def generator_loss(
    d_fake: Optional[Tensor],
    d_logits: Tensor,
    q_logits: Tensor,
    lam: float,
    saturation: Optional[SaturationCounter] = None,
) -> Tensor:
    """
    ``lam * -E[log D(fake)] + distill_loss(d, q)``. With ``lam == 0`` this is the distillation loss itself.
    """
    distill = distill_loss(d_logits, q_logits)
    if lam == 0 or d_fake is None:
        return distill
    return ops.add(ops.scale(adversarial_loss(d_fake, saturation), lam), distill)
