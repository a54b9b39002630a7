"""Joint training of backbone and decision networks, plus hard-gate evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import policy as pol
from . import tensor as T
from .costmodel import policy_flops, static_flops
from .errors import ConfigError, NonFiniteError
from .objectives import BudgetConfig, UsageAccumulator, cross_entropy, usage_loss
from .optim import AdamW, cosine_lr


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 100
    batch_size: int = 64
    warmup_frac: float = 0.1     # leading fraction of epochs with gates forced open
    lr_warmup_frac: float = 0.05  # leading fraction of steps ramping the lr
    dtype: str = "float32"
    eval_batch: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32/float64, got {self.dtype}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class ModelBundle:
    cfg: bb.ModelConfig
    params: bb.BackboneParams
    decisions: pol.DecisionParams | None
    head_mode: str = "full"

    @property
    def adaptive(self):
        return self.decisions is not None

    @classmethod
    def init(cls, cfg, rng, adaptive=True, head_mode="full", dtype=np.float32):
        params = bb.BackboneParams.init(cfg, rng, dtype=dtype)
        decisions = pol.DecisionParams.init(cfg, rng, dtype=dtype) \
            if adaptive else None
        return cls(cfg, params, decisions, head_mode)

    def named_tensors(self):
        out = dict(self.params.named())
        if self.decisions is not None:
            out.update(self.decisions.named())
        return out

    def parameters(self):
        return list(self.named_tensors().values())


def train_step(images, labels, model: ModelBundle, budget: BudgetConfig,
               opt: AdamW, lr_now, *, rng, tau, gates="sampled",
               gate_override=None, straight_through=True):
    """One optimizer step. ``gates``: "sampled" | "open" | "override".

    Returns the scalar loss components. Aborts with NonFiniteError naming
    the first non-finite tensor on the tape if the loss is not finite.
    """
    opt.zero_grad()
    with T.Tape() as tape:
        trace = None
        if gates == "open":
            if model.adaptive:
                logits, _ = pol.adaptive_forward(
                    model.params, model.decisions, images, mode="train",
                    force_open=True)
            else:
                logits = bb.forward(model.params, images)
        elif gates == "override":
            # externally fixed gates: no sampling, no usage objective
            logits, _ = pol.adaptive_forward(
                model.params, model.decisions, images, mode="eval",
                gate_override=gate_override, head_mode=model.head_mode)
        elif gates == "sampled":
            if not model.adaptive:
                raise ConfigError("cannot sample gates without decision nets")
            logits, trace = pol.adaptive_forward(
                model.params, model.decisions, images, mode="train", tau=tau,
                straight_through=straight_through, head_mode=model.head_mode,
                rng=rng)
        else:
            raise ConfigError(f"unknown gates mode {gates!r}")

        l_ce = cross_entropy(logits, labels)
        if trace is not None and trace.blocks:
            acc = UsageAccumulator.from_trace(model.cfg, trace)
            l_usage = usage_loss(acc, budget)
            loss = T.add(l_ce, T.scale(l_usage, budget.lambda_usage))
        else:
            l_usage = None
            loss = l_ce
        if not np.isfinite(loss.data):
            culprit = tape.first_nonfinite() or "loss"
            raise NonFiniteError(f"non-finite training loss; first bad tensor: "
                                 f"{culprit}")
        tape.backward(loss)
    opt.step(lr_now)
    return {"loss": float(loss.data), "l_ce": float(l_ce.data),
            "l_usage": float(l_usage.data) if l_usage is not None else 0.0}


@dataclass
class EvalResult:
    top1: float
    mean_flops: float
    usage: dict                       # per family mean hard usage
    per_sample_flops: np.ndarray
    correct: np.ndarray
    policies: list = field(default_factory=list)  # per-sample dump records

    @property
    def mean_gflops(self):
        return self.mean_flops / 1e9


def _policy_records(trace, offset):
    """Split a batched trace into per-sample dump records."""
    bits = trace.hard_bits()
    if not bits:
        return []
    b = bits[0]["patch"].shape[0]
    records = []
    for i in range(b):
        records.append({
            "sample_id": offset + i,
            "blocks": [{
                "block": blk["block"],
                "patch": blk["patch"][i].tolist(),
                "head": blk["head"][i].tolist(),
                "sub": blk["sub"][i].tolist(),
            } for blk in bits],
        })
    return records


def gates_from_record(record):
    return {
        "patch": np.array([b["patch"] for b in record["blocks"]], dtype=np.int64),
        "head": np.array([b["head"] for b in record["blocks"]], dtype=np.int64),
        "sub": np.array([b["sub"] for b in record["blocks"]], dtype=np.int64),
    }


def evaluate(dataset, model: ModelBundle, batch_size=256, *,
             gate_override_fn=None, force_open=False):
    """Hard-gate deterministic evaluation: accuracy, analytic FLOPs, usage.

    ``gate_override_fn(start, stop)`` may supply fixed per-sample gates for
    the slice (baseline policies). A non-adaptive model (or ``force_open``)
    is priced at the static cost.
    """
    if len(dataset) == 0:
        raise ConfigError("evaluate: empty dataset")
    cfg = model.cfg
    n = len(dataset)
    correct = np.zeros(n, dtype=bool)
    flops = np.zeros(n, dtype=np.float64)
    policies = []
    usage_sums = {"patch": 0.0, "head": 0.0, "sub": 0.0}
    usage_counts = {"patch": 0, "head": 0, "sub": 0}
    static_total = static_flops(cfg).total

    gated = (model.adaptive or gate_override_fn is not None) and not force_open
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        images = dataset.images[start:stop]
        labels = dataset.labels[start:stop]
        if not gated:
            if model.adaptive:
                logits, _ = pol.adaptive_forward(
                    model.params, model.decisions, images, mode="eval",
                    force_open=True)
            else:
                logits = bb.forward(model.params, images)
            flops[start:stop] = static_total
        else:
            override = None
            if gate_override_fn is not None:
                override = gate_override_fn(start, stop)
            logits, trace = pol.adaptive_forward(
                model.params, model.decisions, images, mode="eval",
                head_mode=model.head_mode, gate_override=override)
            records = _policy_records(trace, start)
            policies.extend(records)
            for i, rec in enumerate(records):
                gates = gates_from_record(rec)
                flops[start + i] = policy_flops(cfg, gates,
                                                model.head_mode).total
                alive = np.cumprod(gates["patch"], axis=0)
                usage_sums["patch"] += float(alive.sum())
                usage_counts["patch"] += alive.size
                usage_sums["head"] += float(gates["head"].sum())
                usage_counts["head"] += gates["head"].size
                usage_sums["sub"] += float(gates["sub"].sum())
                usage_counts["sub"] += gates["sub"].size
        correct[start:stop] = logits.data.argmax(axis=1) == labels

    usage = {fam: (usage_sums[fam] / usage_counts[fam]
                   if usage_counts[fam] else 1.0)
             for fam in usage_sums}
    return EvalResult(
        top1=float(correct.mean()),
        mean_flops=float(flops.mean()),
        usage=usage,
        per_sample_flops=flops,
        correct=correct,
        policies=policies,
    )


def fit(model: ModelBundle, train_ds, budget: BudgetConfig, tcfg: TrainConfig,
        seed, *, eval_ds=None, log_fn=None, gate_override_fn=None):
    """Full training loop. Returns the per-epoch log records.

    Epoch schedule: the leading ``warmup_frac`` of epochs run with gates
    forced open and the classification loss alone; afterwards gates are
    sampled and the usage loss joins in. With ``gate_override_fn`` set
    (random-policy finetuning) gates are externally fixed, re-drawn every
    step, for the entire run.
    """
    ss = np.random.SeedSequence(seed)
    shuffle_rng, gumbel_rng, override_rng = \
        (np.random.default_rng(s) for s in ss.spawn(3))
    opt = AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    n = len(train_ds)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    lr_warmup_steps = int(round(tcfg.lr_warmup_frac * total_steps))
    warmup_epochs = int(round(tcfg.warmup_frac * tcfg.epochs)) \
        if model.adaptive and gate_override_fn is None else 0

    logs = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = {"loss": 0.0, "l_ce": 0.0, "l_usage": 0.0}
        frac = epoch / max(tcfg.epochs - 1, 1)
        tau = budget.tau_at(frac)
        for bstart in range(0, n, tcfg.batch_size):
            idx = order[bstart:bstart + tcfg.batch_size]
            lr_now = cosine_lr(tcfg.lr, step, total_steps, lr_warmup_steps)
            if gate_override_fn is not None:
                mode = "override"
                override = gate_override_fn(override_rng, len(idx))
            else:
                override = None
                mode = "open" if (not model.adaptive or epoch < warmup_epochs) \
                    else "sampled"
            out = train_step(train_ds.images[idx], train_ds.labels[idx],
                             model, budget, opt, lr_now, rng=gumbel_rng,
                             tau=tau, gates=mode, gate_override=override)
            for k in sums:
                sums[k] += out[k]
            step += 1
        record = {"epoch": epoch,
                  "l_ce": sums["l_ce"] / steps_per_epoch,
                  "l_usage": sums["l_usage"] / steps_per_epoch,
                  "lr": lr_now, "tau": tau, "mode": mode}
        if eval_ds is not None:
            res = evaluate(eval_ds, model, tcfg.eval_batch,
                           force_open=(mode == "open"))
            record.update(top1=res.top1, mean_gflops=res.mean_gflops,
                          usage_patch=res.usage["patch"],
                          usage_head=res.usage["head"],
                          usage_sub=res.usage["sub"])
        logs.append(record)
        if log_fn is not None:
            log_fn(record)
    return logs
