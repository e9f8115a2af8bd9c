from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .nn import Parameter


@dataclass(frozen=True)
class CosineAnnealing:
    min_lr: float
    total_epochs: int


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Optional[CosineAnnealing] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.schedule is not None and self.schedule.min_lr > self.learning_rate:
            raise ValueError("min_lr exceeds learning_rate")

    def lr_at(self, epoch: int) -> float:
        if self.schedule is None:
            return self.learning_rate
        return cosine_annealing_lr(self.learning_rate, self.schedule.min_lr, epoch,
                                   self.schedule.total_epochs)


def cosine_annealing_lr(base_lr: float, min_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch == 0:
        return base_lr
    if epoch == total_epochs:
        return min_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(params: Iterable[Parameter], config: OptimizerConfig, epoch: int) -> None:
    """One momentum-SGD update with L2 weight decay folded into the gradient.

    g = grad + wd * w;  buf = m * buf + g;  w -= lr(epoch) * buf
    """
    lr = config.lr_at(epoch)
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        if config.momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = np.zeros_like(p.data)
            p.momentum_buffer *= config.momentum
            p.momentum_buffer += g
            g = p.momentum_buffer
        p.data -= lr * g
