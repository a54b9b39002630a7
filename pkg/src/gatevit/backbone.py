"""Configurable small ViT classifier.

Tokens are raster-scan patches (channels-last flattening inside a patch)
plus a learnable class token at row 0. Blocks are pre-norm: attention and
feed-forward each read a layer-normalized input and add onto the residual
stream. The classifier is a bias-free linear map on the final class token.

All forward functions accept an optional gating bundle so the adaptive
model can reuse the exact same code path; with ``gates=None`` no gating
operation is emitted at all, which is the vanilla reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

LN_EPS = 1e-6
ATTN_MASK_VALUE = -1e9  # additive key bias excluding dropped tokens


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    channels: int = 1
    embed_dim: int = 32
    num_heads: int = 4
    num_blocks: int = 4
    ffn_mult: int = 4
    num_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        for field in ("num_patches", "num_heads", "num_blocks", "num_classes",
                      "channels", "ffn_mult"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def tokens(self):
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def ffn_dim(self):
        return self.embed_dim * self.ffn_mult

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) with resampling outside +/- bound*std."""
    x = rng.standard_normal(shape) * std
    lim = bound * std
    bad = np.abs(x) > lim
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > lim
    return x


def parameter_shapes(cfg: ModelConfig):
    """Backbone tensor name -> shape, derivable from the config alone.

    Per block, head ``i`` owns the column slice ``[i*head_dim:(i+1)*head_dim]``
    of the stacked q/k/v projection matrices.
    """
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes = {
        "embed.w": (cfg.patch_dim, d),
        "embed.b": (d,),
        "cls": (d,),
        "pos": (cfg.tokens, d),
    }
    for l in range(cfg.num_blocks):
        p = f"block{l}."
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn1"] = (d, f)
        shapes[p + "ffn2"] = (f, d)
        for nm in ("ln1g", "ln1b", "ln2g", "ln2b"):
            shapes[p + nm] = (d,)
    shapes["head.w"] = (d, cfg.num_classes)
    return shapes


class BackboneParams:
    """Named learnable tensors of the backbone."""

    def __init__(self, cfg: ModelConfig, tensors):
        self.cfg = cfg
        self.t = tensors

    @classmethod
    def init(cls, cfg, rng, dtype=np.float32):
        tensors = {}
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith((".b", "ln1b", "ln2b")):
                data = np.zeros(shape)
            elif name.endswith(("ln1g", "ln2g")):
                data = np.ones(shape)
            else:
                data = trunc_normal(rng, shape)
            tensors[name] = T.Tensor(data, requires_grad=True, name=name,
                                     dtype=dtype)
        return cls(cfg, tensors)

    def named(self):
        return self.t

    def __getitem__(self, name):
        return self.t[name]


class BlockGates:
    """Realized gate tensors for one block (any field may be None = open).

    ``tok``: (B, N) patch keep values, class token excluded.
    ``heads``: (B, H).  ``sub``: (B, 2) for the attention / feed-forward
    sublayers. Values are hard 0/1 at inference and straight-through or
    relaxed tensors during training.
    """

    __slots__ = ("tok", "heads", "sub", "head_mode")

    def __init__(self, tok=None, heads=None, sub=None, head_mode="full"):
        self.tok = tok
        self.heads = heads
        self.sub = sub
        self.head_mode = head_mode


def _lift(z):
    """Allow single-sample (T, D) inputs on batched code paths."""
    if z.ndim == 2:
        return T.reshape(z, (1,) + z.shape), True
    return z, False


def patchify(images, cfg: ModelConfig):
    """(B, H, W, C) pixels -> (B, N, patch_dim) raster-scan patch rows."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise ConfigError(f"image shape {(h, w, c)} does not match config "
                          f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
    g, p = cfg.grid, cfg.patch_size
    x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, cfg.num_patches, cfg.patch_dim)


def patchify_embed(images, params: BackboneParams):
    """Embed pixels into the (B, N+1, D) token matrix entering block 0."""
    cfg = params.cfg
    patches = T.constant(patchify(images, cfg), dtype=params["embed.w"].dtype)
    tok = T.add(T.matmul(patches, params["embed.w"]), params["embed.b"])
    b = patches.shape[0]
    cls = T.tile_leading(T.reshape(params["cls"], (1, cfg.embed_dim)), b)
    z = T.concat([cls, tok], axis=1)
    return T.add(z, params["pos"])


def attention_head(z, wq, wk, wv):
    """Single-head scaled dot-product attention on a (T, D) token matrix."""
    if z.ndim != 2 or z.shape[0] < 1:
        raise ShapeError(f"attention_head expects a (T, D) matrix, got {z.shape}")
    dk = wq.shape[1]
    q, k, v = T.matmul(z, wq), T.matmul(z, wk), T.matmul(z, wv)
    logits = T.scale(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(dk))
    return T.matmul(T.softmax(logits, axis=-1), v)


def _attn_bias(tok_mask_data):
    """(B, T, 1) forward mask values -> constant (B, 1, 1, T) key bias."""
    dead = tok_mask_data[:, :, 0] == 0.0
    bias = np.where(dead, ATTN_MASK_VALUE, 0.0).astype(tok_mask_data.dtype)
    return T.constant(bias[:, None, None, :])


def msa(z, block, cfg: ModelConfig, head_gates=None, head_mode="full",
        attn_bias=None):
    """Multi-head self-attention with optional per-head gating.

    ``full`` gating zeroes a deactivated head's output slice ahead of the
    output projection; ``partial`` replaces its attention map with the
    identity so the value projection passes through untouched.
    """
    z, squeeze = _lift(z)
    b, t, d = z.shape
    h, dk = cfg.num_heads, cfg.head_dim

    def split(x):
        return T.transpose(T.reshape(x, (b, t, h, dk)), (0, 2, 1, 3))

    q = split(T.matmul(z, block["wq"]))
    k = split(T.matmul(z, block["wk"]))
    v = split(T.matmul(z, block["wv"]))
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    if attn_bias is not None:
        logits = T.add(logits, attn_bias)
    ctx = T.matmul(T.softmax(logits, axis=-1), v)
    if head_gates is not None:
        g = T.reshape(head_gates, (b, h, 1, 1))
        if head_mode == "partial":
            keep = T.mul(ctx, g)
            idle = T.mul(v, T.sub(T.constant(np.ones((), dtype=g.dtype)), g))
            ctx = T.add(keep, idle)
        else:
            ctx = T.mul(ctx, g)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = T.matmul(merged, block["wo"])
    return T.reshape(out, (t, d)) if squeeze else out


def ffn(z, block):
    return T.matmul(T.gelu(T.matmul(z, block["ffn1"])), block["ffn2"])


def block_forward(z, params: BackboneParams, l, gates: BlockGates | None = None):
    """One pre-norm transformer block: z' = z + MSA(LN(z)); out = z' + FFN(LN(z')).

    With gates: token rows are scaled by their keep values on entry (class
    token always kept), dropped tokens are additionally excluded from every
    attention softmax and from sublayer outputs, and each sublayer output is
    scaled by its usage gate, so a zero gate reduces to the residual alone.
    """
    cfg = params.cfg
    block = {k.split(".", 1)[1]: v for k, v in params.t.items()
             if k.startswith(f"block{l}.")}
    z, squeeze = _lift(z)
    b = z.shape[0]

    tok_mask = None
    attn_bias = None
    head_gates = None
    sub = (None, None)
    head_mode = "full"
    if gates is not None:
        head_mode = gates.head_mode
        head_gates = gates.heads
        if gates.tok is not None:
            ones = T.constant(np.ones((b, 1), dtype=z.dtype))
            tok_mask = T.reshape(T.concat([ones, gates.tok], axis=1),
                                 (b, cfg.tokens, 1))
            z = T.mul(z, tok_mask)
            attn_bias = _attn_bias(tok_mask.data)
        if gates.sub is not None:
            sub = (T.reshape(T.slice_axis(gates.sub, 1, 0, 1), (b, 1, 1)),
                   T.reshape(T.slice_axis(gates.sub, 1, 1, 2), (b, 1, 1)))

    u = T.layernorm(z, block["ln1g"], block["ln1b"], LN_EPS)
    m = msa(u, block, cfg, head_gates=head_gates, head_mode=head_mode,
            attn_bias=attn_bias)
    if tok_mask is not None:
        m = T.mul(m, tok_mask)
    if sub[0] is not None:
        m = T.mul(m, sub[0])
    z1 = T.add(z, m)

    u2 = T.layernorm(z1, block["ln2g"], block["ln2b"], LN_EPS)
    f = ffn(u2, block)
    if tok_mask is not None:
        f = T.mul(f, tok_mask)
    if sub[1] is not None:
        f = T.mul(f, sub[1])
    out = T.add(z1, f)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def classify(z, params: BackboneParams):
    """Logits from the class-token row of the final block output."""
    z, _ = _lift(z)
    b, t, d = z.shape
    if t < 1:
        raise ShapeError("classify needs at least the class token row")
    cls = T.reshape(T.slice_axis(z, 1, 0, 1), (b, d))
    return T.matmul(cls, params["head.w"])


def forward(params: BackboneParams, images):
    """Gate-free reference forward pass: pixels -> logits."""
    z = patchify_embed(images, params)
    for l in range(params.cfg.num_blocks):
        z = block_forward(z, params, l)
    return classify(z, params)
