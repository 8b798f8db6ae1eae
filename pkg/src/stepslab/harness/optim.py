"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total: int, peak: float, warmup: int = 0,
              start: float = 0.0, floor: float = 0.0) -> float:
    """Learning rate at ``step`` (0..total).

    Linear from ``start`` at step 0 to ``peak`` at ``warmup``, then a half
    cosine down to ``floor`` at ``total``.
    """
    if warmup > 0 and step < warmup:
        return start + (peak - start) * step / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW over a dict of named tensors.

    Decay is applied as ``p -= lr * weight_decay * p`` before the Adam step,
    and only to parameters flagged in ``decay``.
    """

    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, decay: dict[str, bool] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = decay if decay is not None else {k: True for k in params}
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            if self.decay.get(name, False) and self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            mhat = m / dt(c1)
            vhat = v / dt(c2)
            p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(self.eps))
