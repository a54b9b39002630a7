"""Training-loop behaviour: ablation identity, overfitting, budget steering."""

import numpy as np
import pytest

from gatevit import backbone as bb
from gatevit import policy as pol
from gatevit import tensor as T
from gatevit.data import SyntheticTaskSpec, generate_synthetic
from gatevit.errors import ConfigError, NonFiniteError
from gatevit.objectives import BudgetConfig, UsageAccumulator, usage_loss
from gatevit.optim import AdamW, cosine_lr
from gatevit.training import (ModelBundle, TrainConfig, evaluate, fit,
                              train_step)


def micro_cfg(blocks=2, embed=8):
    return bb.ModelConfig(image_size=12, patch_size=4, channels=1,
                          embed_dim=embed, num_heads=2, num_blocks=blocks,
                          num_classes=4)


def micro_data(count=32, seed=0):
    spec = SyntheticTaskSpec(image_size=12, cell=4)
    return generate_synthetic(spec, seed, count)


class TestCosineSchedule:
    def test_endpoints(self):
        assert cosine_lr(1.0, 0, 100) == pytest.approx(1.0)
        assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0, abs=1e-12)
        assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)


class TestTrainStep:
    def test_open_gates_identical_to_vanilla_step(self, rng):
        """With gates forced open and no usage term, the adaptive step
        reproduces the plain backbone step parameter-for-parameter."""
        cfg = micro_cfg()
        ds = micro_data(16)
        models = []
        for adaptive in (True, False):
            init = np.random.default_rng(5)
            model = ModelBundle.init(cfg, init, adaptive=adaptive,
                                     dtype=np.float64)
            opt = AdamW(model.parameters(), lr=1e-3, weight_decay=0.05)
            out = train_step(ds.images[:16], ds.labels[:16], model,
                             BudgetConfig(), opt, 1e-3,
                             rng=np.random.default_rng(0), tau=5.0,
                             gates="open")
            models.append((model, out))
        (adapt, out_a), (plain, out_p) = models
        assert out_a["loss"] == out_p["loss"]
        for name, t in plain.params.named().items():
            assert np.array_equal(t.data, adapt.params[name].data), name

    def test_loss_decreases_on_memorization(self):
        """Overfit sanity: 50 open-gate steps on 32 fixed samples."""
        cfg = micro_cfg(embed=16)
        ds = micro_data(32)
        model = ModelBundle.init(cfg, np.random.default_rng(1),
                                 adaptive=False, dtype=np.float32)
        opt = AdamW(model.parameters(), lr=5e-3, weight_decay=0.0)
        losses = []
        for step in range(50):
            out = train_step(ds.images, ds.labels, model, BudgetConfig(),
                             opt, 5e-3, rng=np.random.default_rng(step),
                             tau=5.0, gates="open")
            losses.append(out["loss"])
        assert np.mean(losses[-5:]) < 0.85 * losses[0]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        cfg = micro_cfg()
        ds = micro_data(8)
        model = ModelBundle.init(cfg, np.random.default_rng(1),
                                 adaptive=False, dtype=np.float32)
        # two huge FFN factors overflow float32 inside the block
        model.params.t["block0.ffn1"].data *= 1e22
        model.params.t["block0.ffn2"].data *= 1e22
        opt = AdamW(model.parameters())
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteError, match="first bad tensor"):
                train_step(ds.images[:8], ds.labels[:8], model, BudgetConfig(),
                           opt, 1e-3, rng=np.random.default_rng(0), tau=5.0,
                           gates="open")

    def test_sampled_gates_need_decisions(self):
        cfg = micro_cfg()
        ds = micro_data(8)
        model = ModelBundle.init(cfg, np.random.default_rng(1), adaptive=False)
        opt = AdamW(model.parameters())
        with pytest.raises(ConfigError):
            train_step(ds.images[:8], ds.labels[:8], model, BudgetConfig(),
                       opt, 1e-3, rng=np.random.default_rng(0), tau=5.0,
                       gates="sampled")


class TestBudgetConvergence:
    def test_usage_only_moves_gates_toward_target(self, rng):
        """Frozen backbone, usage loss alone: mean gate activation drifts
        toward the target monotonically in expectation over 200 steps."""
        cfg = micro_cfg(blocks=3)
        ds = micro_data(64, seed=2)
        model = ModelBundle.init(cfg, np.random.default_rng(3),
                                 dtype=np.float64)
        gamma = 0.3
        budget = BudgetConfig(gamma, gamma, gamma)
        opt = AdamW(list(model.decisions.named().values()), lr=5e-2,
                    weight_decay=0.0)
        grng = np.random.default_rng(0)

        def mean_activation():
            """Expected gate activation: the mean keep-probability (the
            long-run average of hard Gumbel samples equals p)."""
            z = bb.patchify_embed(ds.images, model.params)
            z = bb.block_forward(z, model.params, 0)
            vals = []
            for l in (1, 2):
                probs = pol.decision_forward(z, model.decisions.block(l))
                vals.extend(float(x.data.mean()) for x in
                            (probs.patch, probs.head, probs.sub))
                gates = pol.sample_gates(probs, 5.0, "eval")
                g = bb.BlockGates(tok=gates.patch, heads=gates.head,
                                  sub=gates.sub)
                z = bb.block_forward(z, model.params, l, gates=g)
            return np.mean(vals)

        before = mean_activation()
        for step in range(200):
            opt.zero_grad()
            with T.Tape() as tape:
                _, trace = pol.adaptive_forward(
                    model.params, model.decisions, ds.images, mode="train",
                    tau=5.0, rng=grng)
                acc = UsageAccumulator.from_trace(cfg, trace)
                loss = usage_loss(acc, budget)
                tape.backward(loss)
            opt.step()
        after = mean_activation()
        assert abs(after - gamma) < abs(before - gamma)
        assert abs(after - gamma) < 0.1


class TestEvaluate:
    def test_empty_dataset_rejected(self, rng):
        cfg = micro_cfg()
        ds = micro_data(4)
        ds.images = ds.images[:0]
        ds.labels = ds.labels[:0]
        model = ModelBundle.init(cfg, rng)
        with pytest.raises(ConfigError):
            evaluate(ds, model)

    def test_memorization_reaches_top1_one(self):
        """A model fit to 16 samples classifies them perfectly."""
        cfg = micro_cfg(embed=16)
        ds = micro_data(16, seed=4)
        model = ModelBundle.init(cfg, np.random.default_rng(1),
                                 adaptive=False, dtype=np.float32)
        opt = AdamW(model.parameters(), lr=5e-3, weight_decay=0.0)
        for step in range(300):
            train_step(ds.images, ds.labels, model, BudgetConfig(), opt,
                       5e-3, rng=np.random.default_rng(step), tau=5.0,
                       gates="open")
        res = evaluate(ds, model)
        assert res.top1 == 1.0

    def test_open_gates_flops_equal_static(self, rng):
        from gatevit.costmodel import static_flops
        cfg = micro_cfg()
        ds = micro_data(8)
        model = ModelBundle.init(cfg, rng, adaptive=True)
        res = evaluate(ds, model, force_open=True)
        assert res.mean_flops == static_flops(cfg).total
        assert res.usage == {"patch": 1.0, "head": 1.0, "sub": 1.0}

    def test_adaptive_eval_prices_decision_nets(self, rng):
        from gatevit.costmodel import policy_flops, static_flops
        cfg = micro_cfg(blocks=3)
        ds = micro_data(8)
        model = ModelBundle.init(cfg, np.random.default_rng(2))
        # force every probability to keep: flops = static + decision nets
        for l in (1, 2):
            model.decisions.t[f"dec{l}.bp"].data[:] = 50.0
            model.decisions.t[f"dec{l}.bh"].data[:] = 50.0
            model.decisions.t[f"dec{l}.bb"].data[:] = 50.0
        res = evaluate(ds, model)
        all_open = {
            "patch": np.ones((2, cfg.num_patches), dtype=int),
            "head": np.ones((2, cfg.num_heads), dtype=int),
            "sub": np.ones((2, 2), dtype=int),
        }
        expect = policy_flops(cfg, all_open).total
        assert res.mean_flops == expect
        assert expect > static_flops(cfg).total


class TestFitLoop:
    def test_identical_seeds_identical_trajectories(self):
        cfg = micro_cfg()
        ds = micro_data(32, seed=7)
        tcfg = TrainConfig(epochs=3, batch_size=16, warmup_frac=0.34)

        def run():
            model = ModelBundle.init(cfg, np.random.default_rng(9))
            logs = fit(model, ds, BudgetConfig(0.6, 0.6, 0.6), tcfg, seed=5)
            return model, logs

        m1, logs1 = run()
        m2, logs2 = run()
        assert logs1 == logs2
        for name, t in m1.named_tensors().items():
            assert np.array_equal(t.data, m2.named_tensors()[name].data), name

    def test_total_loss_additivity(self):
        """Reported total equals ce + lambda * usage exactly."""
        cfg = micro_cfg()
        ds = micro_data(16)
        model = ModelBundle.init(cfg, np.random.default_rng(0),
                                 dtype=np.float64)
        opt = AdamW(model.parameters())
        budget = BudgetConfig(0.5, 0.5, 0.5, lambda_usage=2.0)
        out = train_step(ds.images, ds.labels, model, budget, opt, 1e-3,
                         rng=np.random.default_rng(1), tau=5.0,
                         gates="sampled")
        assert out["loss"] == pytest.approx(
            out["l_ce"] + 2.0 * out["l_usage"], rel=1e-12)
