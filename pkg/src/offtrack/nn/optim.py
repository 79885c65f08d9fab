"""Adam with bias correction, plus the one-cycle learning-rate schedule
used for all refiner training (linear warmup to the peak over the first 30%
of steps, cosine decay to peak/100 afterwards)."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: "float | None" = None):
        self.step_count += 1
        t = self.step_count
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data, dtype=np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** t)
            v_hat = self.v[k] / (1 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float,
                 warmup_frac: float = 0.3, final_div: float = 100.0) -> float:
    """Learning rate for `step` in [0, total_steps)."""
    if total_steps <= 0:
        return peak_lr
    floor = peak_lr / final_div
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return floor + (peak_lr - floor) * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
