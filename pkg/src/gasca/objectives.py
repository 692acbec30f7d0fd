"""Real/fake discriminator loss, the generator's adversarial loss and the
reconstruction-plus-adversarial generator loss.

All log arguments are clamped to [EPS_LOG, 1 - EPS_LOG]; gradients are
evaluated at the clamped probabilities so saturated outputs still carry a
finite signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, Tensor, mse_loss

EPS_LOG = 1e-7


@dataclass
class LossBundle:
    value: float
    grads: dict = field(default_factory=dict)
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_adv: float = 0.01

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_adv < 0 or self.lambda_rec + self.lambda_adv <= 0:
            raise ValueError(f"loss weights must be non-negative with a positive sum, got {self}")


def _probabilities(p, name: str) -> Tensor:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError(f"{name}: empty batch")
    # sigmoid saturates to exactly 0.0 or 1.0 in double precision, so the
    # closed interval is accepted and the clamp handles the endpoints
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise ValueError(f"{name}: probabilities must lie in [0, 1]")
    return np.clip(p, EPS_LOG, 1.0 - EPS_LOG)


def discriminator_loss(d_real, d_fake) -> LossBundle:
    """-(1/m) sum[log D(x_mu) + log(1 - D(y))], to be minimized by D."""
    pr = _probabilities(d_real, "d_real")
    pf = _probabilities(d_fake, "d_fake")
    if pr.shape != pf.shape:
        raise ShapeError(f"d_real {pr.shape} and d_fake {pf.shape} differ")
    m = pr.shape[0]
    value = -float(np.sum(np.log(pr) + np.log1p(-pf))) / m
    return LossBundle(value, {"d_real": -1.0 / (m * pr), "d_fake": 1.0 / (m * (1.0 - pf))})


def generator_adversarial_loss(d_fake, non_saturating: bool = False) -> LossBundle:
    """(1/m) sum log(1 - D(y)), minimized by G.

    With ``non_saturating`` the loss is -(1/m) sum log D(y) instead.
    """
    pf = _probabilities(d_fake, "d_fake")
    m = pf.shape[0]
    if non_saturating:
        return LossBundle(-float(np.sum(np.log(pf))) / m, {"d_fake": -1.0 / (m * pf)})
    return LossBundle(float(np.sum(np.log1p(-pf))) / m, {"d_fake": -1.0 / (m * (1.0 - pf))})


def combined_generator_loss(y: Tensor, x_mu: Tensor, d_fake, w: LossWeights,
                            non_saturating: bool = False) -> LossBundle:
    if y.shape != x_mu.shape:
        raise ShapeError(f"reconstruction {y.shape} and target {x_mu.shape} differ")
    rec, grad_y = mse_loss(y, x_mu)
    adv = generator_adversarial_loss(d_fake, non_saturating)
    value = w.lambda_rec * rec + w.lambda_adv * adv.value
    grads = {"y": w.lambda_rec * grad_y, "d_fake": w.lambda_adv * adv.grads["d_fake"]}
    return LossBundle(value, grads, {"mse": rec, "adv": adv.value})
