"""Adam with decoupled weight decay over named DiffArrays."""
from __future__ import annotations

import math

import numpy as np


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                g = p.grad.reshape(-1)
                total += float(np.dot(g, g))
        return math.sqrt(total)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        step = lr / c1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if factor != 1.0:
                g *= factor
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            # biases and norm affines are not decayed
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= step * m / denom
        self.zero_grad()
        return norm
