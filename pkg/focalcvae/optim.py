"""Adam over :class:`~focalcvae.nn.Parameter` lists and the learning-rate schedule."""

import math
from typing import List, Sequence

import numpy as np

from focalcvae.errors import ConfigurationError
from focalcvae.nn import Parameter


class Adam:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-4,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ConfigurationError(f"Adam betas must lie in [0, 1), got {tuple(betas)}")
        self.params: List[Parameter] = list(params)
        self.lr, self.eps = lr, eps
        self.beta1, self.beta2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        """Apply one bias-corrected update; parameters without a gradient are skipped."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def warmup_cosine(step: int, total: int, base_lr: float, warmup: int) -> float:
    """Linear ramp to ``base_lr`` over ``warmup`` steps, then cosine decay toward zero at ``total``."""
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))
