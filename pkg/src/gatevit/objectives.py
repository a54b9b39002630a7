"""Joint objective: classification cross-entropy plus budgeted usage loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .policy import DECISION_FIRST_BLOCK


@dataclass(frozen=True)
class BudgetConfig:
    gamma_p: float = 1.0
    gamma_h: float = 1.0
    gamma_b: float = 1.0
    tau: float = 5.0
    lambda_usage: float = 1.0
    tau_final: float | None = None  # optional linear anneal target, off by default

    def __post_init__(self):
        for name in ("gamma_p", "gamma_h", "gamma_b"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.tau_final is not None and self.tau_final <= 0:
            raise ConfigError("tau_final must be > 0")

    def tau_at(self, frac):
        """Temperature at training progress ``frac`` in [0, 1]."""
        if self.tau_final is None:
            return self.tau
        return self.tau + (self.tau_final - self.tau) * frac


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class over the batch.

    Gradient to the logits is (softmax - onehot) / batch.
    """
    labels = np.asarray(labels)
    z = logits.data
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} vs logits {z.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label outside [0, {c})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    data = np.asarray(nll.mean(), dtype=z.dtype)

    def backward(out):
        def bw(g):
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits.accumulate_grad((g * p) / n)
        return bw

    return T._result("cross_entropy", data, (logits,), backward)


class UsageAccumulator:
    """Flattened gate values of one batch, one list per gate family.

    Expected entry counts per sample are fixed by the architecture: with
    ``L'`` gated blocks and N patches / H heads, patches contribute L'*N
    entries, heads L'*H and sublayers L'*2.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.patch = []
        self.head = []
        self.sub = []

    @classmethod
    def from_trace(cls, cfg, trace):
        acc = cls(cfg)
        patch, head, sub = trace.usage_tensors()
        acc.patch.extend(patch)
        acc.head.extend(head)
        acc.sub.extend(sub)
        return acc

    def expected_per_sample(self):
        lp = self.cfg.num_blocks - DECISION_FIRST_BLOCK
        return {"patch": lp * self.cfg.num_patches,
                "head": lp * self.cfg.num_heads,
                "sub": lp * 2}

    def check_complete(self):
        expected = self.expected_per_sample()
        for fam in ("patch", "head", "sub"):
            ts = getattr(self, fam)
            if not ts:
                raise ShapeError(f"usage accumulator has no {fam} entries")
            n = sum(t.size // t.shape[0] for t in ts)
            if n != expected[fam]:
                raise ShapeError(f"{fam} usage entries per sample {n} != "
                                 f"expected {expected[fam]}")

    def family_mean(self, fam):
        """Single global mean over batch and entries, as a scalar tensor."""
        ts = getattr(self, fam)
        total = T.tsum(ts[0])
        for t in ts[1:]:
            total = T.add(total, T.tsum(t))
        count = sum(t.size for t in ts)
        return T.scale(total, 1.0 / count)


def usage_loss(acc: UsageAccumulator, budget: BudgetConfig):
    """Squared deviation of each family's mean gate usage from its target."""
    acc.check_complete()
    total = None
    for fam, gamma in (("patch", budget.gamma_p), ("head", budget.gamma_h),
                       ("sub", budget.gamma_b)):
        d = T.sub(acc.family_mean(fam), float(gamma))
        sq = T.mul(d, d)
        total = sq if total is None else T.add(total, sq)
    return total
