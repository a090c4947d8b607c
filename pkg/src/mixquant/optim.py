"""Gradient-descent optimizers for the training and search loops."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with classical momentum: v <- mu * v + g; p <- p - lr * v.

    Momentum 0 gives plain gradient descent (used for the architecture
    logits). Parameters with no gradient are skipped.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad


def cosine_lr(base_lr: float, step: int, total_steps: int,
              min_lr: float = 0.0) -> float:
    """Half-cosine decay from base_lr to min_lr over total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))
