"""AdamW with decoupled weight decay, plus a linear-warmup learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gadlab.errors import ConfigError, UsageError
from gadlab.numcore.tensor import Parameter


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_ratio * total_steps``, then constant."""
    if not 0.0 <= warmup_ratio <= 1.0:
        raise ConfigError(f"warmup_ratio must lie in [0, 1], got {warmup_ratio}")
    if total_steps < 0 or not 0 <= step <= max(total_steps, 0):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_ratio * total_steps
    if warmup <= 0 or step >= warmup:
        return float(base_lr)
    return float(base_lr) * step / warmup


@dataclass
class AdamW:
    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list, repr=False)
    v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.trainable and p.grad is None:
                raise UsageError(f"parameter {p.name or '?'} has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
