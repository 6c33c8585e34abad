"""Patch embedding, weight-shared encoder blocks, and cross-attention.

One :class:`PFMBlock` holds a single parameter set. ``msa`` wires it as a
self-attention encoder (used for the source and target branches) and ``mca``
wires the same weights as cross-attention with queries from the source
tokens and keys/values from the target tokens (the polymerized branch).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError
from .module import Module, constant, parameter
from .tensor import Tensor


def patchify(x: Tensor, patch: int) -> Tensor:
    """``B x C x H x W`` -> ``B x N x (C*patch*patch)``, patches in row-major order."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"spatial extent {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = ops.reshape(x, (b, c, gh, patch, gw, patch))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
    return ops.reshape(t, (b, gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, channels: int, height: int, width: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b = tokens.shape[0]
    gh, gw = height // patch, width // patch
    t = ops.reshape(tokens, (b, gh, gw, channels, patch, patch))
    t = ops.transpose(t, (0, 3, 1, 4, 2, 5))
    return ops.reshape(t, (b, channels, height, width))


class PatchEmbedder(Module):
    """Linear projection of non-overlapping patches plus a learnable position table."""

    def __init__(self, image_size: int, patch_size: int = 8, in_channels: int = 3, embed_dim: int = 64, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        if image_size % patch_size:
            raise DimensionError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.num_patches = (image_size // patch_size) ** 2
        fan_in = in_channels * patch_size * patch_size
        self.proj_w = parameter(rng, (fan_in, embed_dim), 1.0 / math.sqrt(fan_in))
        self.proj_b = constant((embed_dim,), 0.0)
        self.pos = parameter(rng, (self.num_patches, embed_dim), 0.02)

    def __call__(self, x: Tensor) -> Tensor:
        return embed_patches(x, self)


def embed_patches(x: Tensor, e: PatchEmbedder) -> Tensor:
    """Embed ``C x H x W`` (-> ``N x d``) or ``B x C x H x W`` (-> ``B x N x d``)."""
    unbatched = x.ndim == 3
    xb = ops.reshape(x, (1,) + x.shape) if unbatched else x
    if xb.ndim != 4 or xb.shape[1] != e.in_channels:
        raise DimensionError(f"embed_patches: expected {e.in_channels} input channels, got shape {x.shape}")
    patches = patchify(xb, e.patch_size)
    if patches.shape[1] != e.num_patches:
        raise DimensionError(f"embed_patches: {patches.shape[1]} patches but position table has {e.num_patches}")
    tokens = ops.linear(patches, e.proj_w, e.proj_b) + e.pos
    return ops.reshape(tokens, tokens.shape[1:]) if unbatched else tokens


class PFMBlock(Module):
    """Pre-norm Transformer encoder block whose weights serve all three branches."""

    def __init__(self, embed_dim: int = 64, heads: int = 4, ffn_mult: int = 4, rng=None):
        super().__init__()
        if embed_dim % heads:
            raise DimensionError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        rng = np.random.default_rng(0) if rng is None else rng
        d, hidden = embed_dim, ffn_mult * embed_dim
        self.embed_dim = d
        self.heads = heads
        self.ln1_g = constant((d,), 1.0)
        self.ln1_b = constant((d,), 0.0)
        self.w_q = parameter(rng, (d, d), 1.0 / math.sqrt(d))
        self.w_k = parameter(rng, (d, d), 1.0 / math.sqrt(d))
        self.w_v = parameter(rng, (d, d), 1.0 / math.sqrt(d))
        self.w_o = parameter(rng, (d, d), 1.0 / math.sqrt(d))
        self.ln2_g = constant((d,), 1.0)
        self.ln2_b = constant((d,), 0.0)
        self.ff_w1 = parameter(rng, (d, hidden), 1.0 / math.sqrt(d))
        self.ff_b1 = constant((hidden,), 0.0)
        self.ff_w2 = parameter(rng, (hidden, d), 1.0 / math.sqrt(hidden))
        self.ff_b2 = constant((d,), 0.0)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    t = ops.reshape(t, (*lead, n, heads, d // heads))
    k = len(lead)
    return ops.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dh = t.shape
    k = len(lead)
    t = ops.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return ops.reshape(t, (*lead, n, h * dh))


def attention(q_in: Tensor, kv_in: Tensor, block: PFMBlock) -> Tensor:
    """Multi-head attention with queries from ``q_in`` and keys/values from ``kv_in``."""
    dh = block.embed_dim // block.heads
    q = _split_heads(ops.matmul(q_in, block.w_q), block.heads)
    k = _split_heads(ops.matmul(kv_in, block.w_k), block.heads)
    v = _split_heads(ops.matmul(kv_in, block.w_v), block.heads)
    scores = ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(dh))
    ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
    return ops.matmul(_merge_heads(ctx), block.w_o)


def _feed_forward(y: Tensor, block: PFMBlock) -> Tensor:
    h = ops.layer_norm(y, block.ln2_g, block.ln2_b)
    h = ops.gelu(ops.linear(h, block.ff_w1, block.ff_b1))
    return y + ops.linear(h, block.ff_w2, block.ff_b2)


def _check_tokens(t: Tensor, block: PFMBlock) -> None:
    if t.ndim < 2 or t.shape[-1] != block.embed_dim:
        raise DimensionError(f"tokens of shape {t.shape} do not match block width {block.embed_dim}")


def msa(tokens: Tensor, block: PFMBlock) -> Tensor:
    """Self-attention encoder: ``y = x + MSA(LN(x))``, ``out = y + FFN(LN(y))``."""
    _check_tokens(tokens, block)
    h = ops.layer_norm(tokens, block.ln1_g, block.ln1_b)
    return _feed_forward(tokens + attention(h, h, block), block)


def mca(q_src: Tensor, kv_tgt: Tensor, block: PFMBlock) -> Tensor:
    """Cross-attention encoder; the residual stream carries ``q_src``."""
    _check_tokens(q_src, block)
    _check_tokens(kv_tgt, block)
    if q_src.shape != kv_tgt.shape:
        raise DimensionError(f"mca: source {q_src.shape} and target {kv_tgt.shape} token sets differ")
    hq = ops.layer_norm(q_src, block.ln1_g, block.ln1_b)
    hk = ops.layer_norm(kv_tgt, block.ln1_g, block.ln1_b)
    return _feed_forward(q_src + attention(hq, hk, block), block)


@dataclass
class BranchOutputs:
    p_s: Tensor
    p_t: Tensor
    p_p: Tensor | None  # None when the polymerized branch is disabled


def pfm_forward(src: Tensor, tgt: Tensor, block: PFMBlock, use_mca: bool = True) -> BranchOutputs:
    if src.shape != tgt.shape:
        raise DimensionError(f"pfm_forward: source {src.shape} and target {tgt.shape} differ")
    p_p = mca(src, tgt, block) if use_mca else None
    return BranchOutputs(p_s=msa(src, block), p_t=msa(tgt, block), p_p=p_p)


def sample_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance of flattened per-sample token matrices, batch-averaged."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.ndim <= 2:
        return float(np.sqrt((diff * diff).sum()))
    per_sample = np.sqrt((diff * diff).reshape(diff.shape[0], -1).sum(axis=1))
    return float(per_sample.mean())


@dataclass(frozen=True)
class GeodesicReport:
    d_sp: float
    d_tp: float
    d_st: float
    ratio: float
    slack: float


def geodesic_report(out: BranchOutputs) -> GeodesicReport:
    """Distances between branch outputs; ``slack`` is the triangle-inequality gap."""
    if out.p_p is None:
        raise DimensionError("geodesic_report needs the polymerized branch output")
    ps, pt, pp = out.p_s.data, out.p_t.data, out.p_p.data
    if not (ps.shape == pt.shape == pp.shape):
        raise DimensionError(f"branch shapes differ: {ps.shape}, {pt.shape}, {pp.shape}")
    d_sp = sample_distance(ps, pp)
    d_tp = sample_distance(pt, pp)
    d_st = sample_distance(ps, pt)
    if d_tp == 0.0:
        ratio = 1.0 if d_sp == 0.0 else math.inf
    else:
        ratio = d_sp / d_tp
    return GeodesicReport(d_sp=d_sp, d_tp=d_tp, d_st=d_st, ratio=ratio, slack=d_sp + d_tp - d_st)
