"""Per-block decision networks and gate application.

Each block past the first carries three linear policy heads: a per-token
patch head (read from every patch row), plus head- and sublayer-usage heads
read from the class token. Sigmoid outputs are keep-probabilities; realized
decisions come from a binary Gumbel-Softmax during training and a plain
0.5 threshold at inference.

Patch dropping is monotone: a cumulative alive gate multiplies each block's
per-block decision, so a dropped token can never return. The gate actually
applied to a token at a block is that cumulative value, and it is what the
usage accumulator sees.
"""

from __future__ import annotations

import numpy as np

from . import backbone as bb
from . import tensor as T
from .errors import ConfigError

HEAD_MODES = ("partial", "full")

DECISION_FIRST_BLOCK = 1  # 0-indexed; the first block always runs fully


class DecisionParams:
    """Policy-head tensors for blocks ``DECISION_FIRST_BLOCK .. L-1``."""

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.t = tensors

    @classmethod
    def shapes(cls, cfg):
        d, h = cfg.embed_dim, cfg.num_heads
        shapes = {}
        for l in range(DECISION_FIRST_BLOCK, cfg.num_blocks):
            p = f"dec{l}."
            shapes[p + "wp"] = (d, 1)
            shapes[p + "bp"] = (1,)
            shapes[p + "wh"] = (d, h)
            shapes[p + "bh"] = (h,)
            shapes[p + "wb"] = (d, 2)
            shapes[p + "bb"] = (2,)
        return shapes

    @classmethod
    def init(cls, cfg, rng, dtype=np.float32):
        tensors = {}
        for name, shape in cls.shapes(cfg).items():
            data = np.zeros(shape) if ".b" in name.split(".", 1)[1] \
                else bb.trunc_normal(rng, shape)
            tensors[name] = T.Tensor(data, requires_grad=True, name=name,
                                     dtype=dtype)
        return cls(cfg, tensors)

    def named(self):
        return self.t

    def block(self, l):
        p = f"dec{l}."
        return {k[len(p):]: v for k, v in self.t.items() if k.startswith(p)}


class GateProbabilities:
    """Sigmoid keep-probabilities for one block: patches (B, N),
    heads (B, H), sublayers (B, 2)."""

    __slots__ = ("patch", "head", "sub")

    def __init__(self, patch, head, sub):
        self.patch = patch
        self.head = head
        self.sub = sub


class GateDecisions:
    """Realized gates for one block, same shapes as the probabilities.

    Training: straight-through tensors (hard forward value, relaxed
    gradient) or pure relaxed values. Inference: hard 0/1 constants.
    """

    __slots__ = ("patch", "head", "sub")

    def __init__(self, patch, head, sub):
        self.patch = patch
        self.head = head
        self.sub = sub


def decision_forward(z, dec_block):
    """Keep-probabilities for one block from its input tokens.

    Patch probabilities are per-token (row j depends only on token j);
    head and sublayer probabilities read the class-token row.
    """
    b, t, d = z.shape
    tok = T.slice_axis(z, 1, 1, t)
    mp = T.sigmoid(T.reshape(T.add(T.matmul(tok, dec_block["wp"]),
                                   dec_block["bp"]), (b, t - 1)))
    cls = T.reshape(T.slice_axis(z, 1, 0, 1), (b, d))
    mh = T.sigmoid(T.add(T.matmul(cls, dec_block["wh"]), dec_block["bh"]))
    msub = T.sigmoid(T.add(T.matmul(cls, dec_block["wb"]), dec_block["bb"]))
    return GateProbabilities(mp, mh, msub)


def _prob_eps(dtype):
    return 1e-7 if dtype == np.float32 else 1e-12


def gumbel_softmax_binary(p, tau, rng=None, noise=None):
    """Binary concrete relaxation of keep/drop sampling.

    Perturbs the two logits (log p, log(1-p)) with i.i.d. Gumbel noise and
    returns the keep coordinate of the temperature-``tau`` softmax, which
    for two categories is exactly sigmoid of the perturbed log-odds divided
    by ``tau``. The drop coordinate is 1 minus the result, so the pair sums
    to one identically. Differentiable in ``p``.

    ``noise`` is a pre-drawn Gumbel array of shape ``p.shape + (2,)``;
    passing it makes the sample a deterministic function of ``p``.
    """
    if tau <= 0:
        raise ConfigError(f"gumbel temperature must be > 0, got {tau}")
    if noise is None:
        if rng is None:
            raise ConfigError("gumbel_softmax_binary needs an rng or noise")
        noise = rng.gumbel(size=p.shape + (2,))
    noise = np.asarray(noise, dtype=p.dtype)
    eps = _prob_eps(p.dtype)
    pc = T.clamp(p, eps, 1.0 - eps)
    log_odds = T.sub(T.log(pc), T.log(T.sub(1.0, pc)))
    shift = T.constant((noise[..., 0] - noise[..., 1]).astype(p.dtype))
    return T.sigmoid(T.scale(T.add(log_odds, shift), 1.0 / tau))


def sample_gates(probs: GateProbabilities, tau, mode, straight_through=True,
                 rng=None, noise=None):
    """Realize one block's gates from its keep-probabilities.

    ``train``: every gate is a Gumbel-Softmax sample (hard forward / soft
    backward when ``straight_through``). ``eval``: deterministic threshold,
    keep iff p >= 0.5, no noise.
    """
    if mode == "eval":
        return GateDecisions(
            T.constant((probs.patch.data >= 0.5).astype(probs.patch.dtype)),
            T.constant((probs.head.data >= 0.5).astype(probs.head.dtype)),
            T.constant((probs.sub.data >= 0.5).astype(probs.sub.dtype)),
        )
    if mode != "train":
        raise ConfigError(f"unknown gate mode {mode!r}")
    out = []
    for i, p in enumerate((probs.patch, probs.head, probs.sub)):
        g = gumbel_softmax_binary(
            p, tau, rng=rng, noise=None if noise is None else noise[i])
        if straight_through:
            g = T.straight_through_hard(g)
        out.append(g)
    return GateDecisions(*out)


def apply_patch_selection(z, patch_gate, alive):
    """Scale token rows by their cumulative keep value.

    Returns the masked tokens and the updated alive gate
    (``alive AND patch_gate``, as a product). The class-token row is never
    scaled. Callers exclude dead tokens from attention via the alive gate.
    """
    new_alive = patch_gate if alive is None else T.mul(alive, patch_gate)
    b, t, _ = z.shape
    ones = T.constant(np.ones((b, 1), dtype=z.dtype))
    tok_mask = T.reshape(T.concat([ones, new_alive], axis=1), (b, t, 1))
    return T.mul(z, tok_mask), new_alive


def apply_head_selection(z, block, cfg, head_gate, mode="full", attn_bias=None):
    """MSA with per-head gating; ``z`` is the normalized block input.

    ``partial``: a deactivated head passes its value projection through an
    identity attention map. ``full``: the head's output slice is zeroed
    before the output projection, equivalent to removing its rows from the
    projection while keeping static shapes.
    """
    if mode not in HEAD_MODES:
        raise ConfigError(f"head mode must be one of {HEAD_MODES}, got {mode!r}")
    return bb.msa(z, block, cfg, head_gates=head_gate, head_mode=mode,
                  attn_bias=attn_bias)


def apply_block_selection(z, params, l, sub_gate):
    """Block forward with the two sublayers scaled by their usage gates."""
    return bb.block_forward(z, params, l,
                            gates=bb.BlockGates(sub=sub_gate))


class BlockTrace:
    """Gates realized at one block, for usage loss, dumps and costing."""

    __slots__ = ("index", "probs", "decisions", "alive")

    def __init__(self, index, probs, decisions, alive):
        self.index = index
        self.probs = probs
        self.decisions = decisions
        self.alive = alive  # cumulative patch gate after this block (B, N)


class ForwardTrace:
    """Per-block gate record of one adaptive forward pass."""

    def __init__(self):
        self.blocks = []

    def add(self, tr):
        self.blocks.append(tr)

    def usage_tensors(self):
        """Gate tensors per family, as consumed by the usage objective.

        Patches contribute their cumulative alive gate per block (the value
        actually applied to the token), heads and sublayers their per-block
        decisions.
        """
        patch = [tr.alive for tr in self.blocks]
        head = [tr.decisions.head for tr in self.blocks]
        sub = [tr.decisions.sub for tr in self.blocks]
        return patch, head, sub

    def hard_bits(self):
        """Per-block 0/1 decision arrays {patch, head, sub} for dumping.

        Only meaningful when gates were realized hard (eval mode or
        straight-through training).
        """
        return [{
            "block": tr.index,
            "patch": tr.decisions.patch.data.astype(np.int8),
            "head": tr.decisions.head.data.astype(np.int8),
            "sub": tr.decisions.sub.data.astype(np.int8),
        } for tr in self.blocks]


def _override_gates(override, l, b, dtype):
    g = override[l]

    def lift(x):
        x = np.asarray(x, dtype=dtype)
        if x.ndim == 1:  # one policy shared by the whole batch
            x = np.broadcast_to(x, (b,) + x.shape)
        return T.constant(np.ascontiguousarray(x))

    return GateDecisions(lift(g["patch"]), lift(g["head"]), lift(g["sub"]))


def adaptive_forward(params, decisions, images, *, mode="train", tau=5.0,
                     straight_through=True, head_mode="full", rng=None,
                     gate_override=None, force_open=False, noise=None):
    """Forward pass with per-block gating. Returns (logits, ForwardTrace).

    ``gate_override``: optional {block_index: {patch, head, sub}} of hard
    gate arrays replacing the decision-network sampling (baseline policies).
    ``force_open``: run every gate at 1 (warmup phase, upperbound eval);
    decision networks are not evaluated.
    ``noise``: optional {block_index: (patch, head, sub)} pre-drawn Gumbel
    arrays, for deterministic gradient checks.
    """
    cfg = params.cfg
    z = bb.patchify_embed(images, params)
    b = z.shape[0]
    trace = ForwardTrace()
    alive = None
    for l in range(cfg.num_blocks):
        gated = l >= DECISION_FIRST_BLOCK and not force_open
        if not gated:
            z = bb.block_forward(z, params, l)
            continue
        if gate_override is not None:
            gates = _override_gates(gate_override, l, b, z.dtype)
            probs = None
        else:
            probs = decision_forward(z, decisions.block(l))
            gates = sample_gates(probs, tau, mode, straight_through, rng,
                                 noise=None if noise is None else noise.get(l))
        alive = gates.patch if alive is None else T.mul(alive, gates.patch)
        trace.add(BlockTrace(l, probs, gates, alive))
        z = bb.block_forward(z, params, l, gates=bb.BlockGates(
            tok=alive, heads=gates.head, sub=gates.sub, head_mode=head_mode))
    return bb.classify(z, params), trace
