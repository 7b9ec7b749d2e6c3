"""AdamW, learning-rate schedules and parameter EMA."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor


class AdamW:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
              weight_decay: float = 0.0) -> tuple[list[np.ndarray], dict]:
    """Functional AdamW update on plain arrays; ``state`` starts as ``{}``."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = state.get("t", 0) + 1
    m = state.get("m") or [np.zeros_like(p) for p in params]
    v = state.get("v") or [np.zeros_like(p) for p in params]
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        p = p - lr * weight_decay * p
        p = p - lr * (mi / (1 - b1**t)) / (np.sqrt(vi / (1 - b2**t)) + eps)
        new_params.append(p)
        new_m.append(mi)
        new_v.append(vi)
    return new_params, {"t": t, "m": new_m, "v": new_v}


def warmup_linear_decay(step: int, total: int, base_lr: float, warmup: int) -> float:
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = max(total - warmup, 1)
    return base_lr * max(0.0, 1.0 - (step - warmup) / remaining)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class EMA:
    """Exponential moving average of parameters: shadow <- d*shadow + (1-d)*param."""

    def __init__(self, params: dict[str, np.ndarray], decay: float = 0.9999):
        self.decay = decay
        self.shadow = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray]) -> None:
        d = self.decay
        for k, v in params.items():
            self.shadow[k] = d * self.shadow[k] + (1.0 - d) * v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.shadow.items()}
