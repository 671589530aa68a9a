"""AdamW with decoupled weight decay and the linear warmup/decay schedule."""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    def __init__(self, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def sync(self, params: dict[str, Tensor]) -> None:
        """Create buffers for new trainables and drop buffers of removed ones."""
        for name in list(self.m):
            if name not in params:
                self.discard(name)
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def discard(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.sync(params)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"trainable {name} has no gradient")
            g = p.grad
            dt = p.data.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.grad = None


def lr_at(t: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if not 1 <= t <= total:
        raise ContractError(f"step {t} outside [1, {total}]")
    if warmup > 0 and t <= warmup:
        return peak * t / warmup
    if total == warmup:
        return peak
    return peak * (total - t) / (total - warmup)
