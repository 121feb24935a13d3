"""SGD with momentum/weight decay and the two learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ValidationError


@dataclass(frozen=True)
class OptimizerConfig:
    """Per-stage SGD settings.

    step_decay multiplies the base rate by decay_factor every decay_period
    epochs; robbins_monro uses lr / (1 + t)^alpha and requires
    0.5 < alpha <= 1 so the step sizes sum to infinity while their squares
    stay summable.
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "step_decay"
    decay_factor: float = 0.2
    decay_period: int = 15
    rm_alpha: float = 0.7

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in ("step_decay", "robbins_monro"):
            raise ValidationError(f"unknown schedule '{self.schedule}'")
        if self.schedule == "step_decay":
            if self.decay_factor <= 0 or self.decay_period < 1:
                raise ValidationError(
                    f"step_decay needs factor > 0 and period >= 1, got "
                    f"({self.decay_factor}, {self.decay_period})")
        elif not 0.5 < self.rm_alpha <= 1.0:
            raise ValidationError(
                f"robbins_monro needs 0.5 < alpha <= 1, got {self.rm_alpha}")


def lr_at(config: OptimizerConfig, step: int | None = None,
          epoch: int | None = None) -> float:
    """Learning rate at a step (robbins_monro) or epoch (step_decay)."""
    if config.schedule == "step_decay":
        if epoch is None or epoch < 0:
            raise ValidationError("step_decay schedule needs epoch >= 0")
        return config.lr * config.decay_factor ** (epoch // config.decay_period)
    if step is None or step < 0:
        raise ValidationError("robbins_monro schedule needs step >= 0")
    return config.lr / (1.0 + step) ** config.rm_alpha


def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """In-place heavy-ball update: v <- momentum*v + (g + wd*p); p <- p - lr*v.

    The velocity accumulates even when lr is zero.
    """
    for p, g, v in zip(params, grads, velocities, strict=True):
        if p.shape != g.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to sgd_step")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v
