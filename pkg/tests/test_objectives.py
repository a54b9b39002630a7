"""Loss functions: cross-entropy and budgeted usage loss."""

import numpy as np
import pytest

from gatevit import backbone as bb
from gatevit import policy as pol
from gatevit import tensor as T
from gatevit.errors import ShapeError
from gatevit.objectives import (BudgetConfig, UsageAccumulator, cross_entropy,
                                usage_loss)

from conftest import analytic_grads, rel_err


class TestCrossEntropy:
    def test_uniform_logits_log_c(self):
        for c in (2, 5, 13):
            logits = T.Tensor(np.zeros((3, c)), dtype=np.float64)
            loss = cross_entropy(logits, np.zeros(3, dtype=int))
            np.testing.assert_allclose(loss.data, np.log(c), rtol=1e-12)

    def test_confident_correct_is_near_zero(self):
        z = np.zeros((1, 4))
        z[0, 2] = 1000.0
        loss = cross_entropy(T.Tensor(z, dtype=np.float64), np.array([2]))
        assert loss.data < 1e-9

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = rng.normal(size=(4, 5))
        labels = np.array([0, 2, 4, 1])

        def build(logits):
            return cross_entropy(logits, labels)

        g, _ = analytic_grads(build, [z], np.float64)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1
        np.testing.assert_allclose(g[0], p / 4, rtol=1e-10)

        # and against central differences
        eps = 1e-6
        fd = np.zeros_like(z)
        for i in range(z.size):
            zp, zm = z.copy().reshape(-1), z.copy().reshape(-1)
            zp[i] += eps
            zm[i] -= eps
            fd.reshape(-1)[i] = (
                cross_entropy(T.Tensor(zp.reshape(4, 5), dtype=np.float64),
                              labels).data
                - cross_entropy(T.Tensor(zm.reshape(4, 5), dtype=np.float64),
                                labels).data) / (2 * eps)
        assert rel_err(g[0], fd) < 1e-6

    def test_invalid_label(self):
        logits = T.Tensor(np.zeros((2, 3)), dtype=np.float64)
        with pytest.raises(IndexError):
            cross_entropy(logits, np.array([0, 3]))


def micro_cfg():
    return bb.ModelConfig(image_size=8, patch_size=4, channels=1,
                          embed_dim=8, num_heads=2, num_blocks=3,
                          num_classes=3)


def fill_accumulator(cfg, values):
    """values: dict family -> list of per-block arrays (B, width)."""
    acc = UsageAccumulator(cfg)
    for fam in ("patch", "head", "sub"):
        getattr(acc, fam).extend(
            T.Tensor(v, dtype=np.float64) for v in values[fam])
    return acc


class TestUsageLoss:
    def test_exact_targets_zero_loss(self):
        cfg = micro_cfg()
        b = 4
        vals = {
            "patch": [np.full((b, 4), 0.5)] * 2,
            "head": [np.full((b, 2), 0.25)] * 2,
            "sub": [np.full((b, 2), 0.75)] * 2,
        }
        acc = fill_accumulator(cfg, vals)
        loss = usage_loss(acc, BudgetConfig(0.5, 0.25, 0.75))
        assert abs(loss.data) < 1e-15

    def test_all_ones_half_targets(self):
        """All gates 1 with every target 0.5 gives 3 * 0.25."""
        cfg = micro_cfg()
        vals = {
            "patch": [np.ones((2, 4))] * 2,
            "head": [np.ones((2, 2))] * 2,
            "sub": [np.ones((2, 2))] * 2,
        }
        acc = fill_accumulator(cfg, vals)
        loss = usage_loss(acc, BudgetConfig(0.5, 0.5, 0.5))
        np.testing.assert_allclose(loss.data, 0.75, rtol=1e-12)

    def test_matches_scalar_loop_oracle(self, rng):
        cfg = micro_cfg()
        vals = {
            "patch": [rng.uniform(size=(3, 4)) for _ in range(2)],
            "head": [rng.uniform(size=(3, 2)) for _ in range(2)],
            "sub": [rng.uniform(size=(3, 2)) for _ in range(2)],
        }
        acc = fill_accumulator(cfg, vals)
        got = usage_loss(acc, BudgetConfig(0.3, 0.6, 0.9)).data

        expect = 0.0
        for fam, gamma in (("patch", 0.3), ("head", 0.6), ("sub", 0.9)):
            total, count = 0.0, 0
            for arr in vals[fam]:
                for row in arr:
                    for x in row:
                        total += x
                        count += 1
            expect += (total / count - gamma) ** 2
        assert abs(got - expect) < 1e-7

    def test_incomplete_accumulator_rejected(self):
        cfg = micro_cfg()
        acc = fill_accumulator(cfg, {
            "patch": [np.ones((2, 4))],  # one gated block missing
            "head": [np.ones((2, 2))] * 2,
            "sub": [np.ones((2, 2))] * 2,
        })
        with pytest.raises(ShapeError):
            usage_loss(acc, BudgetConfig())

    def test_from_trace_counts(self, rng):
        cfg = micro_cfg()
        params = bb.BackboneParams.init(cfg, rng, dtype=np.float64)
        dec = pol.DecisionParams.init(cfg, rng, dtype=np.float64)
        with T.Tape():
            _, trace = pol.adaptive_forward(
                params, dec, rng.normal(size=(2, 8, 8, 1)), mode="train",
                rng=np.random.default_rng(0))
            acc = UsageAccumulator.from_trace(cfg, trace)
            acc.check_complete()
        assert len(acc.patch) == 2  # gated blocks

    def test_budget_validation(self):
        with pytest.raises(Exception):
            BudgetConfig(gamma_p=0.0)
        with pytest.raises(Exception):
            BudgetConfig(tau=-1.0)
