"""Analytic FLOPs accounting for a config and a realized gate policy.

Counting conventions, applied uniformly so ratios are meaningful:

- matmul (m, k) @ (k, n): 2*m*k*n (multiply-accumulate = 2)
- bias/residual add, positional add, scaling by 1/sqrt(dk): 1 per element
- softmax: 3 per element (exp, sum, divide)
- layernorm: 5 per element
- gelu: 8 per element
- sigmoid: 4 per element
- hard gate application and token gathering: 0 (control flow)

Policy semantics: a block's patch gates remove tokens from that block's
input, monotonically (once dropped, a token never returns). A partially
deactivated head still pays its value and output projection but not the
query/key projections, attention logits or softmax; a fully deactivated
head pays nothing and its rows leave the output projection. A skipped
sublayer costs nothing, not even its norm or residual add. Decision
networks run on every gated block regardless of the outcome, priced on the
tokens alive at block entry.

All quantities are exact integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelConfig
from .errors import ContractError
from .policy import DECISION_FIRST_BLOCK, HEAD_MODES

PART_KEYS = ("qkv_proj", "attn_logits", "attn_apply", "out_proj", "ffn",
             "decision_net", "norms_residual")


@dataclass
class CostReport:
    per_block: list
    embed: int
    classifier: int
    kept_patches: float  # mean alive patches per block
    kept_heads: float    # mean active heads per block
    kept_blocks: float   # sum over blocks of (active sublayers / 2)

    @property
    def block_total(self):
        return sum(sum(b.values()) for b in self.per_block)

    @property
    def total(self):
        return self.embed + self.classifier + self.block_total

    @property
    def gflops(self):
        return self.total / 1e9

    def to_dict(self):
        return {
            "total_flops": self.total,
            "gflops": float(f"{self.gflops:.3g}"),
            "embed": self.embed,
            "classifier": self.classifier,
            "per_block": self.per_block,
            "kept_patches": self.kept_patches,
            "kept_heads": self.kept_heads,
            "kept_blocks": self.kept_blocks,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _embed_flops(cfg: ModelConfig):
    n, d = cfg.num_patches, cfg.embed_dim
    proj = 2 * n * cfg.patch_dim * d
    bias = n * d
    pos = cfg.tokens * d
    return proj + bias + pos


def _decision_flops(cfg: ModelConfig, alive_in):
    d, h = cfg.embed_dim, cfg.num_heads
    patch = alive_in * (2 * d + 1 + 4)  # per token: matvec, bias, sigmoid
    head = 2 * d * h + h + 4 * h
    sub = 2 * d * 2 + 2 + 4 * 2
    return patch + head + sub


def _block_flops(cfg: ModelConfig, n, head_bits, sub_bits, head_mode):
    """One block on ``n`` tokens. Returns the per-part dict (no decision)."""
    d, dk, h, f = cfg.embed_dim, cfg.head_dim, cfg.num_heads, cfg.ffn_dim
    parts = dict.fromkeys(PART_KEYS, 0)
    msa_on, ffn_on = int(sub_bits[0]), int(sub_bits[1])
    active = int(np.sum(head_bits))
    off = h - active

    if msa_on:
        parts["norms_residual"] += 5 * n * d  # ln1
        per_proj = 2 * n * d * dk
        parts["qkv_proj"] += active * 3 * per_proj
        if head_mode == "partial":
            parts["qkv_proj"] += off * per_proj  # value projection still runs
        parts["attn_logits"] += active * (2 * n * n * dk + n * n + 3 * n * n)
        parts["attn_apply"] += active * 2 * n * n * dk
        contrib = h if head_mode == "partial" else active
        parts["out_proj"] += 2 * n * (contrib * dk) * d
        parts["norms_residual"] += n * d  # residual add

    if ffn_on:
        parts["norms_residual"] += 5 * n * d  # ln2
        parts["ffn"] += 2 * n * d * f + 8 * n * f + 2 * n * f * d
        parts["norms_residual"] += n * d  # residual add

    return parts


def static_flops(cfg: ModelConfig) -> CostReport:
    """Full gate-free backbone: every patch, head and block active."""
    per_block = []
    n = cfg.tokens
    ones_h = np.ones(cfg.num_heads, dtype=np.int64)
    for _ in range(cfg.num_blocks):
        per_block.append(_block_flops(cfg, n, ones_h, (1, 1), "full"))
    return CostReport(
        per_block=per_block,
        embed=_embed_flops(cfg),
        classifier=2 * cfg.embed_dim * cfg.num_classes,
        kept_patches=float(cfg.num_patches),
        kept_heads=float(cfg.num_heads),
        kept_blocks=float(cfg.num_blocks),
    )


def _check_hard(name, a):
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ContractError(f"{name} gates must be hard 0/1, got {a!r}")
    return a.astype(np.int64)


def policy_flops(cfg: ModelConfig, gates, head_mode="full") -> CostReport:
    """Cost of one forward pass under realized hard gates.

    ``gates``: {"patch": (L', N), "head": (L', H), "sub": (L', 2)} arrays of
    0/1 per-block decisions for the L' = L - 1 gated blocks, in block order.
    Relaxed values are a contract violation.
    """
    if head_mode not in HEAD_MODES:
        raise ContractError(f"head_mode must be one of {HEAD_MODES}")
    lp = cfg.num_blocks - DECISION_FIRST_BLOCK
    patch = _check_hard("patch", gates["patch"])
    head = _check_hard("head", gates["head"])
    sub = _check_hard("sub", gates["sub"])
    if patch.shape != (lp, cfg.num_patches) or head.shape != (lp, cfg.num_heads) \
            or sub.shape != (lp, 2):
        raise ContractError(
            f"gate shapes {patch.shape}/{head.shape}/{sub.shape} do not match "
            f"config ({lp} gated blocks, N={cfg.num_patches}, H={cfg.num_heads})")

    per_block = []
    ones_h = np.ones(cfg.num_heads, dtype=np.int64)
    alive = np.ones(cfg.num_patches, dtype=np.int64)
    kept_p, kept_h, kept_b = [], [], []
    for l in range(cfg.num_blocks):
        if l < DECISION_FIRST_BLOCK:
            parts = _block_flops(cfg, cfg.tokens, ones_h, (1, 1), head_mode)
            kept_p.append(cfg.num_patches)
            kept_h.append(cfg.num_heads)
            kept_b.append(1.0)
        else:
            i = l - DECISION_FIRST_BLOCK
            dec = _decision_flops(cfg, int(alive.sum()))
            alive = alive & patch[i]
            n = int(alive.sum()) + 1
            parts = _block_flops(cfg, n, head[i] & sub[i, 0], sub[i], head_mode)
            parts["decision_net"] = dec
            kept_p.append(int(alive.sum()))
            kept_h.append(int((head[i] & sub[i, 0]).sum()))
            kept_b.append(float(sub[i].sum()) / 2.0)
        per_block.append(parts)
    return CostReport(
        per_block=per_block,
        embed=_embed_flops(cfg),
        classifier=2 * cfg.embed_dim * cfg.num_classes,
        kept_patches=float(np.mean(kept_p)),
        kept_heads=float(np.mean(kept_h)),
        kept_blocks=float(np.sum(kept_b)),
    )
