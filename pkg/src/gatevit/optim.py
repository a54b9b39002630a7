"""Decoupled-weight-decay adaptive-moments optimizer with cosine schedule."""

import math

import numpy as np

from . import kernels


def cosine_lr(base_lr, step, total_steps, warmup_steps=0):
    """Cosine decay from base_lr to 0, with an optional linear ramp-in."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    frac = min(max(frac, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Holds first/second moment buffers per parameter tensor.

    Weight decay is decoupled and applied only to matrices; vectors and
    scalars (biases, norm affines, the class token) are not decayed.
    Parameters whose grad is None for a step are skipped entirely.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.05,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = [np.zeros(p.data.size, dtype=p.data.dtype) for p in self.params]
        self._v = [np.zeros(p.data.size, dtype=p.data.dtype) for p in self.params]
        self._steps = [0] * len(self.params)  # per-param: grads may be absent

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._steps[i] += 1
            bc1 = 1.0 - self.beta1 ** self._steps[i]
            bc2 = 1.0 - self.beta2 ** self._steps[i]
            wd = self.weight_decay if p.data.ndim >= 2 else 0.0
            kernels.adamw_update(
                p.data.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1),
                self._m[i], self._v[i], lr, self.beta1, self.beta2,
                self.eps, wd, bc1, bc2)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
