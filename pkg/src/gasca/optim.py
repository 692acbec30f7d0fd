"""Adam and a central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import NonFiniteError, Parameter


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update in place, then zero the grads."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter of shape {p.shape}")
    for p in params:
        p.step += 1
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError(f"invalid Adam hyperparameters {self}")

    def step(self, params: Iterable[Parameter]) -> None:
        adam_step(params, self.lr, self.beta1, self.beta2, self.eps)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def reset_adam_state(params: Iterable[Parameter]) -> None:
    """Forget moments and step count, as a newly created optimizer would."""
    for p in params:
        p.m[...] = 0.0
        p.v[...] = 0.0
        p.step = 0


def relative_error(a, b, floor: float = 1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(f: Callable[[], float], params: Iterable[Parameter],
                      h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference grads.

    ``f`` must run a forward and backward pass and return the scalar loss,
    accumulating analytic gradients into ``p.grad`` for every parameter.
    Magnitudes below ``floor`` are compared absolutely.
    """
    params = list(params)
    zero_grads(params)
    f()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        if flat.size:
            worst = max(worst, float(relative_error(grad.reshape(-1), numeric, floor).max()))
    zero_grads(params)
    return worst
