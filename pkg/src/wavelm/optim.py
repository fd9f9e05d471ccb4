"""Adam with bias correction, plus the optional inverse-sqrt warmup schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class Adam:
    """Adam over a fixed parameter list.

    Keeps first/second moment buffers per parameter and a shared step
    counter; step() applies the bias-corrected update in place, then zeroes
    the gradients. A parameter with grad=None is an error, named.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(
                    f"parameter {p.name or f'#{i}'} has no gradient")
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


def inverse_sqrt_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup then 1/sqrt decay; warmup_steps <= 0 means constant lr."""
    if warmup_steps <= 0:
        return base_lr
    step = max(step, 1)
    return base_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))
