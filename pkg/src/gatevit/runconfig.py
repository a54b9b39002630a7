"""Strict JSON run configuration: every key validated, unknown keys rejected."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig
from .data import Dataset, SyntheticTaskSpec, generate_synthetic, load_image_folder
from .errors import ConfigError
from .objectives import BudgetConfig
from .policy import HEAD_MODES
from .training import TrainConfig

_MODEL_KEYS = ("image_size", "patch_size", "channels", "embed_dim",
               "num_heads", "num_blocks", "ffn_mult", "num_classes")
_BUDGET_KEYS = ("gamma_p", "gamma_h", "gamma_b", "tau", "lambda_usage",
                "tau_final")
_TRAIN_KEYS = ("lr", "weight_decay", "epochs", "batch_size", "warmup_frac",
               "lr_warmup_frac", "dtype", "eval_batch")
_SYNTH_KEYS = ("kind", "num_train", "num_val", "clutter_density",
               "occlusion_fraction", "hard_fraction")
_FOLDER_KEYS = ("kind", "path", "val_fraction")
_TOP_KEYS = ("model", "budget", "train", "data", "adaptive", "head_mode",
             "seed", "out", "sweep")


def _strict(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}")


def _section(section, d, allowed, builder):
    _strict(section, d, allowed)
    try:
        return builder(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    budget: BudgetConfig
    train: TrainConfig
    data: dict
    adaptive: bool = True
    head_mode: str = "full"
    seed: int = 0
    out: str | None = None
    sweep: tuple | None = None


def parse_config(raw: dict) -> RunConfig:
    _strict("config", raw, _TOP_KEYS)
    for required in ("model", "data"):
        if required not in raw:
            raise ConfigError(f"config: missing required section '{required}'")
    model = _section("model", raw["model"], _MODEL_KEYS, ModelConfig)
    budget = _section("budget", raw.get("budget", {}), _BUDGET_KEYS, BudgetConfig)
    train = _section("train", raw.get("train", {}), _TRAIN_KEYS, TrainConfig)

    data = dict(raw["data"])
    kind = data.get("kind")
    if kind == "synthetic":
        _strict("data", data, _SYNTH_KEYS)
        if model.channels != 1:
            raise ConfigError("data: synthetic task is single-channel; "
                              "set model.channels = 1")
        if model.num_classes != 4:
            raise ConfigError("data: synthetic relpos task has 4 classes; "
                              "set model.num_classes = 4")
        if model.grid < 3:
            raise ConfigError("data: synthetic task needs a patch grid of "
                              "at least 3x3")
        data.setdefault("num_train", 2048)
        data.setdefault("num_val", 512)
    elif kind == "folder":
        _strict("data", data, _FOLDER_KEYS)
        if "path" not in data:
            raise ConfigError("data: folder kind needs a 'path'")
        data.setdefault("val_fraction", 0.2)
    else:
        raise ConfigError(f"data: kind must be 'synthetic' or 'folder', "
                          f"got {kind!r}")

    head_mode = raw.get("head_mode", "full")
    if head_mode not in HEAD_MODES:
        raise ConfigError(f"head_mode: must be one of {HEAD_MODES}")
    adaptive = raw.get("adaptive", True)
    if not isinstance(adaptive, bool):
        raise ConfigError("adaptive: must be true or false")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: must be an integer")

    sweep = None
    if "sweep" in raw:
        _strict("sweep", raw["sweep"], ("budgets",))
        budgets = raw["sweep"].get("budgets", [])
        if len(budgets) < 2:
            raise ConfigError("sweep: need at least 2 budget triples")
        for b in budgets:
            if len(b) != 3:
                raise ConfigError(f"sweep: budget {b} is not a triple")
        sweep = tuple(tuple(float(g) for g in b) for b in budgets)

    return RunConfig(model=model, budget=budget, train=train, data=data,
                     adaptive=adaptive, head_mode=head_mode, seed=seed,
                     out=raw.get("out"), sweep=sweep)


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(raw)


def config_to_dict(rc: RunConfig) -> dict:
    out = {
        "model": {k: getattr(rc.model, k) for k in _MODEL_KEYS},
        "budget": {k: getattr(rc.budget, k) for k in _BUDGET_KEYS},
        "train": {k: getattr(rc.train, k) for k in _TRAIN_KEYS},
        "data": rc.data,
        "adaptive": rc.adaptive,
        "head_mode": rc.head_mode,
        "seed": rc.seed,
    }
    if rc.sweep is not None:
        out["sweep"] = {"budgets": [list(b) for b in rc.sweep]}
    return out


def make_datasets(rc: RunConfig):
    """(train, val) datasets derived from the config and its single seed."""
    data = rc.data
    if data["kind"] == "synthetic":
        spec = SyntheticTaskSpec(
            image_size=rc.model.image_size,
            cell=rc.model.patch_size,
            clutter_density=data.get("clutter_density", 0.5),
            occlusion_fraction=data.get("occlusion_fraction", 0.25),
            hard_fraction=data.get("hard_fraction", 0.5),
        )
        train = generate_synthetic(spec, rc.seed, data["num_train"], "train")
        val = generate_synthetic(spec, rc.seed, data["num_val"], "val")
        return train, val
    ds = load_image_folder(data["path"], rc.model.image_size, rc.model.channels)
    stride = max(int(round(1.0 / data["val_fraction"])), 2)
    idx = np.arange(len(ds))
    val_mask = idx % stride == 0
    def take(mask, split):
        return Dataset(ds.images[mask], ds.labels[mask], split,
                       None, ds.class_names)
    return take(~val_mask, "train"), take(val_mask, "val")
