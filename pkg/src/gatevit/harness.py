"""Experiment orchestration: run directories, baselines, sweeps, analytics.

Run directory layout:
    config.json, checkpoint.bin, train_log.jsonl, metrics.csv,
    policies.jsonl, stats/{per_block.csv, per_class.csv, patch_masks.csv}

Baselines:
    upperbound   trained backbone with every gate open
    random       random gates on the trained backbone, no finetuning
    random_plus  backbone finetuned under re-drawn random gates, then
                 evaluated under fixed random gates

Random policies match a target usage profile: head/sublayer gates are
i.i.d. Bernoulli per block, and patch gates are drawn by progressive
subsampling (only currently-alive tokens may survive), which reproduces
the monotone alive-fraction shape, and hence the cost shape, of learned
policies.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
from dataclasses import dataclass, replace

import numpy as np

from . import backbone as bb
from . import policy as pol
from .checkpoint import load_checkpoint, save_checkpoint
from .costmodel import policy_flops, static_flops
from .data import Dataset
from .errors import ConfigError, DataError
from .objectives import BudgetConfig
from .policy import DECISION_FIRST_BLOCK
from .runconfig import RunConfig, config_to_dict, make_datasets
from .tensor import Tensor
from .training import ModelBundle, evaluate, fit, gates_from_record

BASELINE_KINDS = ("upperbound", "random", "random_plus")


# ---------------------------------------------------------------------------
# random policies


def _flat_survival(target_mean, blocks):
    """Per-block survival rate s with mean_l(s^l) == target_mean, by bisection."""
    if target_mean >= 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        mean = np.mean([mid ** (l + 1) for l in range(blocks)])
        if mean < target_mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _per_block(fraction, blocks):
    if np.isscalar(fraction):
        return [float(fraction)] * blocks
    fraction = list(fraction)
    if len(fraction) != blocks:
        raise ConfigError(f"need {blocks} per-block fractions, got "
                          f"{len(fraction)}")
    return [float(f) for f in fraction]


def random_policy(cfg, fractions, rng, count):
    """Per-sample hard gates matching target usage fractions in expectation.

    ``fractions``: {"patch", "head", "sub"}, each a scalar or a per-gated-
    block list. Patch fractions are cumulative alive targets; scalars are
    expanded so the mean cumulative alive fraction matches the scalar.
    Returns {"patch": (count, L', N), "head": (count, L', H),
    "sub": (count, L', 2)} int8 arrays.
    """
    lp = cfg.num_blocks - DECISION_FIRST_BLOCK
    n, h = cfg.num_patches, cfg.num_heads
    if np.isscalar(fractions["patch"]):
        s = _flat_survival(float(fractions["patch"]), lp)
        alive_targets = [s ** (l + 1) for l in range(lp)]
    else:
        alive_targets = _per_block(fractions["patch"], lp)
    head_f = _per_block(fractions["head"], lp)
    sub_f = _per_block(fractions["sub"], lp)

    patch = np.zeros((count, lp, n), dtype=np.int8)
    head = np.zeros((count, lp, h), dtype=np.int8)
    sub = np.zeros((count, lp, 2), dtype=np.int8)
    alive = np.ones((count, n), dtype=np.int8)
    prev_target = 1.0
    for i in range(lp):
        surv = min(alive_targets[i] / max(prev_target, 1e-9), 1.0)
        prev_target = alive_targets[i]
        draw = (rng.random((count, n)) < surv).astype(np.int8)
        alive = alive & draw
        patch[:, i] = alive  # per-block decision: dead tokens stay 0
        head[:, i] = rng.random((count, h)) < head_f[i]
        sub[:, i] = rng.random((count, 2)) < sub_f[i]
    return {"patch": patch, "head": head, "sub": sub}


def override_slice(gates, start, stop):
    """Batch slice of a random_policy result as an adaptive_forward override."""
    lp = gates["patch"].shape[1]
    return {DECISION_FIRST_BLOCK + i: {
        "patch": gates["patch"][start:stop, i],
        "head": gates["head"][start:stop, i],
        "sub": gates["sub"][start:stop, i],
    } for i in range(lp)}


def policy_profile(records, cfg):
    """Per-block mean usage fractions of a policy dump, per family.

    Patch fractions are cumulative alive fractions, suitable as targets for
    ``random_policy`` so random baselines match the learned cost shape.
    """
    lp = cfg.num_blocks - DECISION_FIRST_BLOCK
    alive_sum = np.zeros(lp)
    head_sum = np.zeros(lp)
    sub_sum = np.zeros(lp)
    for rec in records:
        g = gates_from_record(rec)
        alive_sum += np.cumprod(g["patch"], axis=0).mean(axis=1)
        head_sum += g["head"].mean(axis=1)
        sub_sum += g["sub"].mean(axis=1)
    m = len(records)
    return {"patch": (alive_sum / m).tolist(),
            "head": (head_sum / m).tolist(),
            "sub": (sub_sum / m).tolist()}


# ---------------------------------------------------------------------------
# policy analytics


@dataclass
class PolicyStats:
    per_block: list   # rows: {block, family, mean_fraction, std_fraction}
    per_class: list   # rows: {group, count, mean_gflops, p25, p50, p75}
    patch_masks: list  # rows: {sample_id, block, mask}


def analyze_policies(records, dataset: Dataset, cfg, head_mode="full"):
    """Aggregate a policy dump into per-block and per-class usage stats."""
    if len(records) != len(dataset):
        raise DataError(f"policy dump has {len(records)} records but dataset "
                        f"has {len(dataset)} samples")
    lp = cfg.num_blocks - DECISION_FIRST_BLOCK
    alive_frac = np.zeros((len(records), lp))
    head_frac = np.zeros((len(records), lp))
    sub_frac = np.zeros((len(records), lp))
    flops = np.zeros(len(records))
    masks = []
    for i, rec in enumerate(records):
        if rec["sample_id"] != i:
            raise DataError(f"policy dump sample_id {rec['sample_id']} out of "
                            f"order at row {i}")
        g = gates_from_record(rec)
        alive = np.cumprod(g["patch"], axis=0)
        alive_frac[i] = alive.mean(axis=1)
        head_frac[i] = g["head"].mean(axis=1)
        sub_frac[i] = g["sub"].mean(axis=1)
        flops[i] = policy_flops(cfg, g, head_mode).total
        for b in range(lp):
            masks.append({"sample_id": i,
                          "block": DECISION_FIRST_BLOCK + b,
                          "mask": "".join(str(int(x)) for x in alive[b])})

    per_block = []
    for fam, frac in (("patch", alive_frac), ("head", head_frac),
                      ("sub", sub_frac)):
        for b in range(lp):
            per_block.append({
                "block": DECISION_FIRST_BLOCK + b, "family": fam,
                "mean_fraction": float(frac[:, b].mean()),
                "std_fraction": float(frac[:, b].std()),
            })

    groups = [(f"class_{c}", dataset.labels == c)
              for c in range(dataset.num_classes)]
    if dataset.difficulty is not None:
        groups += [("difficulty_easy", dataset.difficulty == 0),
                   ("difficulty_hard", dataset.difficulty == 1)]
    per_class = []
    for name, mask in groups:
        if not mask.any():
            continue
        gf = flops[mask] / 1e9
        per_class.append({
            "group": name, "count": int(mask.sum()),
            "mean_gflops": float(gf.mean()),
            "p25": float(np.percentile(gf, 25)),
            "p50": float(np.percentile(gf, 50)),
            "p75": float(np.percentile(gf, 75)),
        })
    return PolicyStats(per_block, per_class, masks)


# ---------------------------------------------------------------------------
# run directories


def prepare_out_dir(out_dir, overwrite=False):
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not overwrite:
            raise ConfigError(f"output directory not empty: {out_dir} "
                              "(use --overwrite)")
        shutil.rmtree(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "stats"), exist_ok=True)


def _fmt(x, spec):
    return format(float(x), spec)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "gamma_p", "gamma_h", "gamma_b", "top1",
                    "gflops"])
        for r in rows:
            w.writerow([r["run_id"], _fmt(r["gamma_p"], ".3g"),
                        _fmt(r["gamma_h"], ".3g"), _fmt(r["gamma_b"], ".3g"),
                        _fmt(r["top1"], ".4f"), _fmt(r["gflops"], ".3g")])


def write_stats(stats: PolicyStats, stats_dir):
    with open(os.path.join(stats_dir, "per_block.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["block", "family", "mean_fraction", "std_fraction"])
        for r in stats.per_block:
            w.writerow([r["block"], r["family"],
                        _fmt(r["mean_fraction"], ".6f"),
                        _fmt(r["std_fraction"], ".6f")])
    with open(os.path.join(stats_dir, "per_class.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "count", "mean_gflops", "p25_gflops",
                    "p50_gflops", "p75_gflops"])
        for r in stats.per_class:
            w.writerow([r["group"], r["count"], _fmt(r["mean_gflops"], ".6g"),
                        _fmt(r["p25"], ".6g"), _fmt(r["p50"], ".6g"),
                        _fmt(r["p75"], ".6g")])
    with open(os.path.join(stats_dir, "patch_masks.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "block", "mask"])
        for r in stats.patch_masks:
            w.writerow([r["sample_id"], r["block"], r["mask"]])


def write_policies(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_policies(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def save_model(path, rc: RunConfig, model: ModelBundle):
    save_checkpoint(path, config_to_dict(rc), model.named_tensors())


def load_model(path):
    """Rebuild a ModelBundle (and its RunConfig dict) from a checkpoint."""
    cfg_dict, tensors = load_checkpoint(path)
    model_cfg = bb.ModelConfig(**cfg_dict["model"])
    expected = dict(bb.parameter_shapes(model_cfg))
    has_decisions = any(name.startswith("dec") for name in tensors)
    if has_decisions:
        expected.update(pol.DecisionParams.shapes(model_cfg))
    if set(tensors) != set(expected):
        raise ConfigError("checkpoint tensors do not match its config "
                          f"(missing {sorted(set(expected) - set(tensors))[:3]}, "
                          f"extra {sorted(set(tensors) - set(expected))[:3]})")
    back = {}
    dec = {}
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(expected[name]):
            raise ConfigError(f"checkpoint tensor {name} has shape "
                              f"{arr.shape}, expected {expected[name]}")
        t = Tensor(arr, requires_grad=True, name=name)
        (dec if name.startswith("dec") else back)[name] = t
    params = bb.BackboneParams(model_cfg, back)
    decisions = pol.DecisionParams(model_cfg, dec) if dec else None
    return ModelBundle(model_cfg, params, decisions,
                       cfg_dict.get("head_mode", "full")), cfg_dict


def _metrics_row(run_id, rc: RunConfig, res, gammas=None):
    gp, gh, gsub = gammas if gammas is not None else \
        (rc.budget.gamma_p, rc.budget.gamma_h, rc.budget.gamma_b)
    return {"run_id": run_id, "gamma_p": gp, "gamma_h": gh, "gamma_b": gsub,
            "top1": res.top1, "gflops": res.mean_gflops}


def _finalize_run(out_dir, rc, model, res, val_ds, gammas=None):
    run_id = os.path.basename(os.path.normpath(out_dir))
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config_to_dict(rc), f, indent=2, sort_keys=True)
    save_model(os.path.join(out_dir, "checkpoint.bin"), rc, model)
    row = _metrics_row(run_id, rc, res, gammas)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), [row])
    if res.policies:
        write_policies(os.path.join(out_dir, "policies.jsonl"), res.policies)
        stats = analyze_policies(res.policies, val_ds, rc.model, rc.head_mode)
        write_stats(stats, os.path.join(out_dir, "stats"))
    return row


# ---------------------------------------------------------------------------
# top-level runs


def _log_writer(path):
    f = open(path, "w")

    def log(record):
        f.write(json.dumps(record, sort_keys=True) + "\n")
        f.flush()
    log.close = f.close
    return log


def run_train(rc: RunConfig, out_dir, overwrite=False):
    """Train per config (adaptive or vanilla) and write all run artifacts."""
    prepare_out_dir(out_dir, overwrite)
    train_ds, val_ds = make_datasets(rc)
    init_rng = np.random.default_rng(np.random.SeedSequence((rc.seed, 1)))
    model = ModelBundle.init(rc.model, init_rng, adaptive=rc.adaptive,
                             head_mode=rc.head_mode, dtype=rc.train.np_dtype)
    log = _log_writer(os.path.join(out_dir, "train_log.jsonl"))
    try:
        fit(model, train_ds, rc.budget, rc.train, rc.seed,
            eval_ds=val_ds, log_fn=log)
    finally:
        log.close()
    res = evaluate(val_ds, model, rc.train.eval_batch)
    row = _finalize_run(out_dir, rc, model, res, val_ds)
    return {"model": model, "eval": res, "row": row}


def run_eval(rc: RunConfig, ckpt_path, out_dir, overwrite=False):
    """Evaluate an existing checkpoint under this config's data."""
    prepare_out_dir(out_dir, overwrite)
    model, _ = load_model(ckpt_path)
    _, val_ds = make_datasets(rc)
    res = evaluate(val_ds, model, rc.train.eval_batch)
    row = _finalize_run(out_dir, rc, model, res, val_ds)
    return {"model": model, "eval": res, "row": row}


def _random_fractions(rc: RunConfig, profile):
    if profile is not None:
        return profile
    return {"patch": rc.budget.gamma_p, "head": rc.budget.gamma_h,
            "sub": rc.budget.gamma_b}


def run_baseline(kind, rc: RunConfig, ckpt_path, out_dir, *, profile=None,
                 overwrite=False):
    """Evaluate (and for random_plus, first finetune) a baseline policy.

    ``profile``: per-block usage fractions (e.g. from ``policy_profile`` of
    a learned run) so the random baselines match its computational cost;
    defaults to the config's flat budget targets.
    """
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"baseline kind must be one of {BASELINE_KINDS}")
    prepare_out_dir(out_dir, overwrite)
    model, _ = load_model(ckpt_path)
    train_ds, val_ds = make_datasets(rc)

    if kind == "upperbound":
        res = evaluate(val_ds, model, rc.train.eval_batch, force_open=True)
        row = _finalize_run(out_dir, rc, model, res, val_ds,
                            gammas=(1.0, 1.0, 1.0))
        return {"model": model, "eval": res, "row": row}

    fractions = _random_fractions(rc, profile)
    if kind == "random_plus":
        def per_step_gates(rng, batch):
            return override_slice(
                random_policy(rc.model, fractions, rng, batch), 0, batch)

        log = _log_writer(os.path.join(out_dir, "train_log.jsonl"))
        try:
            fit(model, train_ds, rc.budget, rc.train, rc.seed,
                eval_ds=val_ds, log_fn=log,
                gate_override_fn=per_step_gates)
        finally:
            log.close()

    eval_rng = np.random.default_rng(np.random.SeedSequence((rc.seed, 99)))
    fixed = random_policy(rc.model, fractions, eval_rng, len(val_ds))

    def ov(start, stop):
        return override_slice(fixed, start, stop)

    res = evaluate(val_ds, model, rc.train.eval_batch, gate_override_fn=ov)
    row = _finalize_run(out_dir, rc, model, res, val_ds)
    return {"model": model, "eval": res, "row": row}


def sweep_budgets(rc: RunConfig, out_root, overwrite=False):
    """One training run per budget triple; rows sorted by gflops."""
    if not rc.sweep:
        raise ConfigError("config has no sweep.budgets section")
    os.makedirs(out_root, exist_ok=True)
    rows = []
    for i, (gp, gh, gsub) in enumerate(rc.sweep):
        sub_rc = replace(rc, budget=replace(rc.budget, gamma_p=gp,
                                            gamma_h=gh, gamma_b=gsub),
                         sweep=None)
        run_dir = os.path.join(out_root, f"budget_{i:02d}")
        out = run_train(sub_rc, run_dir, overwrite)
        rows.append(out["row"])
    rows.sort(key=lambda r: r["gflops"])
    write_metrics_csv(os.path.join(out_root, "tradeoff.csv"), rows)
    return rows
