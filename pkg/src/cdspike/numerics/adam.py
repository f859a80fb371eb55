"""Adam with classic L2 weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NumericsError, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


def adam_step(p: np.ndarray, g: np.ndarray, state: AdamState, t: int,
              lr: float, beta1: float, beta2: float, eps: float,
              weight_decay: float) -> np.ndarray:
    """One Adam update; mutates ``state`` moments, returns the new values."""
    if weight_decay:
        g = g + weight_decay * p
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    mhat = state.m / (1.0 - beta1 ** t)
    vhat = state.v / (1.0 - beta2 ** t)
    return p - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Moment-tracked optimizer over a list of parameter Tensors."""

    def __init__(self, params, lr: float = 0.02, betas=(0.9, 0.999),
                 eps: float = 1e-3, weight_decay: float = 1e-4):
        self.params = [p for p in params if p.requires_grad]
        if not self.params:
            raise NumericsError("optimizer needs at least one trainable parameter")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise NumericsError(f"betas must lie in [0, 1), got {betas}")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.state = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            p.data = adam_step(p.data, p.grad, st, self.t, self.lr,
                               self.beta1, self.beta2, self.eps,
                               self.weight_decay).astype(p.data.dtype)
