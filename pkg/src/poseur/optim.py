"""AdamW with per-parameter learning-rate multipliers and a milestone step schedule."""
from __future__ import annotations

import numpy as np


class AdamW:
    """Adam moments with decoupled weight decay.

    ``lr_mult`` maps a parameter id to a learning-rate factor (default 1).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4, lr_mult=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_mult = dict(lr_mult or {})
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step_lr = lr * self.lr_mult.get(id(p), 1.0)
            p.data = p.data * (1.0 - step_lr * self.weight_decay) - step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def milestone_lr(base_lr, step, total_steps, milestones=(0.6, 0.85), factor=0.1):
    """``base_lr`` times ``factor`` per milestone (fractions of ``total_steps``) already passed."""
    passed = sum(step >= int(round(f * total_steps)) for f in milestones)
    return base_lr * factor**passed
