"""Attention building blocks: multi-head attention, pooled spatial reduction of
keys, intra-scale transformer blocks, and the cross-scale fusing layer.

Token layout is (..., L, C) with any number of leading batch axes.  Functions
that need the 2-D grid (convolutional FFN, pooling) take or carry (h, w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import counting
from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


@dataclass
class AttentionConfig:
    channels: int
    heads: int

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dw_kernel: Tensor | None = None  # present => convolutional variant


@dataclass
class SpatialReduction:
    """Fixed-size pooling of key maps with one projection/norm pair per scale."""
    pool: int
    projs: list  # [(w, b, NormParams), ...] bound to key scales by position


@dataclass
class FusingLayerParams:
    norm1: NormParams
    attn: AttentionParams
    sr: SpatialReduction
    norm2: NormParams
    ffn: FFNParams


@dataclass
class SRABlockParams:
    norm1: NormParams
    attn: AttentionParams
    sr: SpatialReduction
    norm2: NormParams
    ffn: FFNParams


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = T.matmul(x, w)
    if b is not None:
        out = T.add(out, b)
    return out


def norm(x: Tensor, p: NormParams, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, p.gamma, p.beta, eps)


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """(..., h*w, C) -> (..., C, h, w)"""
    c = x.shape[-1]
    return T.reshape(T.swapaxes(x, -1, -2), x.shape[:-2] + (c, h, w))


def grid_to_tokens(x: Tensor) -> Tensor:
    """(..., C, h, w) -> (..., h*w, C)"""
    c, h, w = x.shape[-3], x.shape[-2], x.shape[-1]
    return T.swapaxes(T.reshape(x, x.shape[:-3] + (c, h * w)), -1, -2)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    l, c = x.shape[-2], x.shape[-1]
    x = T.reshape(x, x.shape[:-1] + (heads, c // heads))
    return T.swapaxes(x, -3, -2)  # (..., heads, L, d)


def _merge_heads(x: Tensor) -> Tensor:
    h, l, d = x.shape[-3], x.shape[-2], x.shape[-1]
    return T.reshape(T.swapaxes(x, -3, -2), x.shape[:-3] + (l, h * d))


def multi_head_self_attention(q: Tensor, k: Tensor, v: Tensor,
                              params: AttentionParams, cfg: AttentionConfig,
                              recorder: list | None = None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d)) V per head, heads concatenated, output-projected."""
    if k.shape[-2] == 0:
        raise ValueError("attention requires at least one key token")
    if q.shape[-1] != cfg.channels or k.shape[-1] != cfg.channels:
        raise ValueError("token width does not match attention config")
    with counting.scope("q_proj"):
        qh = _split_heads(linear(q, params.wq, params.bq), cfg.heads)
    with counting.scope("kv_proj"):
        kh = _split_heads(linear(k, params.wk, params.bk), cfg.heads)
        vh = _split_heads(linear(v, params.wv, params.bv), cfg.heads)
    with counting.scope("scores"):
        logits = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), Tensor(cfg.scale))
    with counting.scope("softmax"):
        attn = T.softmax(logits, axis=-1)
    if recorder is not None:
        recorder.append(attn.data.copy())
    with counting.scope("values"):
        ctx = _merge_heads(T.matmul(attn, vh))
    with counting.scope("out_proj"):
        return linear(ctx, params.wo, params.bo)


def feed_forward(x: Tensor, params: FFNParams, grid: tuple[int, int] | None = None) -> Tensor:
    """Expansion, (optional depthwise conv on the token grid), GELU, projection."""
    h = linear(x, params.w1, params.b1)
    if params.dw_kernel is not None:
        if grid is None:
            raise ValueError("convolutional feed-forward needs the token grid shape")
        gh, gw = grid
        g = tokens_to_grid(h, gh, gw)
        g = T.depthwise_conv3x3(g, params.dw_kernel)
        h = grid_to_tokens(g)
    h = T.gelu(h)
    return linear(h, params.w2, params.b2)


def spatial_reduce(maps: list, sr: SpatialReduction) -> Tensor:
    """Pool each key map to PxP, project, norm, GELU, concatenate along tokens."""
    if len(maps) != len(sr.projs):
        raise ValueError(f"{len(maps)} key scales but {len(sr.projs)} projection pairs")
    pieces = []
    for fmap, (w, b, np_) in zip(maps, sr.projs):
        with counting.scope("pool"):
            pooled = T.adaptive_avg_pool2d(tokens_to_grid(fmap.tokens, fmap.h, fmap.w),
                                           (sr.pool, sr.pool))
        with counting.scope("sr_proj"):
            tok = grid_to_tokens(pooled)
            tok = T.gelu(norm(linear(tok, w, b), np_))
        pieces.append(tok)
    return pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=-2)


def sra_block(fmap, params: SRABlockParams, cfg: AttentionConfig,
              recorder: list | None = None):
    """Pre-norm transformer block with pooled-key attention and convolutional FFN.

    Queries pass through norm1; keys are the raw map, reduced by `params.sr`.
    """
    x = fmap.tokens
    q = norm(x, params.norm1)
    kv = spatial_reduce([fmap], params.sr)
    x = T.add(x, multi_head_self_attention(q, kv, kv, params.attn, cfg, recorder))
    y = feed_forward(norm(x, params.norm2), params.ffn, grid=(fmap.h, fmap.w))
    x = T.add(x, y)
    return fmap.with_tokens(x)


def fusing_layer(x_i, fused_prev: list, params: FusingLayerParams,
                 cfg: AttentionConfig, recorder: list | None = None):
    """Cross-scale fusion: the query scale attends to pooled copies of itself
    plus all previously fused scales, then a convolutional FFN refines it.

    Key order is [query scale, earlier fused scales in scale order]; each key
    scale is bound to its own projection/norm pair by position.
    """
    if x_i.c != cfg.channels:
        raise ValueError("query map width does not match fusing width")
    for m in fused_prev:
        if m.c != cfg.channels:
            raise ValueError("fused key map width does not match fusing width")
    q = norm(x_i.tokens, params.norm1)
    with counting.scope("sr"):
        kv = spatial_reduce([x_i] + list(fused_prev), params.sr)
    with counting.scope("attn"):
        a = multi_head_self_attention(q, kv, kv, params.attn, cfg, recorder)
    a = T.add(a, x_i.tokens)
    with counting.scope("ffn"):
        y = feed_forward(norm(a, params.norm2), params.ffn, grid=(x_i.h, x_i.w))
    return x_i.with_tokens(T.add(a, y))


# -- parameter constructors -------------------------------------------------


def init_attention(store: ParamStore, prefix: str, c: int) -> AttentionParams:
    return AttentionParams(
        wq=store.weight(f"{prefix}.wq", (c, c)), bq=store.zeros(f"{prefix}.bq", (c,)),
        wk=store.weight(f"{prefix}.wk", (c, c)), bk=store.zeros(f"{prefix}.bk", (c,)),
        wv=store.weight(f"{prefix}.wv", (c, c)), bv=store.zeros(f"{prefix}.bv", (c,)),
        wo=store.weight(f"{prefix}.wo", (c, c)), bo=store.zeros(f"{prefix}.bo", (c,)),
    )


def init_norm(store: ParamStore, prefix: str, c: int) -> NormParams:
    return NormParams(gamma=store.ones(f"{prefix}.gamma", (c,)),
                      beta=store.zeros(f"{prefix}.beta", (c,)))


def init_ffn(store: ParamStore, prefix: str, c: int, ratio: float,
             convolutional: bool) -> FFNParams:
    hidden = int(round(c * ratio))
    return FFNParams(
        w1=store.weight(f"{prefix}.w1", (c, hidden)),
        b1=store.zeros(f"{prefix}.b1", (hidden,)),
        w2=store.weight(f"{prefix}.w2", (hidden, c)),
        b2=store.zeros(f"{prefix}.b2", (c,)),
        dw_kernel=(store.weight(f"{prefix}.dw", (hidden, 3, 3)) if convolutional else None),
    )


def init_spatial_reduction(store: ParamStore, prefix: str, c: int, pool: int,
                           n_scales: int) -> SpatialReduction:
    projs = []
    for j in range(n_scales):
        projs.append((store.weight(f"{prefix}.sr{j}.w", (c, c)),
                      store.zeros(f"{prefix}.sr{j}.b", (c,)),
                      init_norm(store, f"{prefix}.sr{j}.norm", c)))
    return SpatialReduction(pool=pool, projs=projs)


def init_sra_block(store: ParamStore, prefix: str, c: int, pool: int,
                   ratio: float) -> SRABlockParams:
    return SRABlockParams(
        norm1=init_norm(store, f"{prefix}.norm1", c),
        attn=init_attention(store, f"{prefix}.attn", c),
        sr=init_spatial_reduction(store, f"{prefix}", c, pool, 1),
        norm2=init_norm(store, f"{prefix}.norm2", c),
        ffn=init_ffn(store, f"{prefix}.ffn", c, ratio, convolutional=True),
    )


def init_fusing_layer(store: ParamStore, prefix: str, c: int, pool: int,
                      ratio: float, n_key_scales: int) -> FusingLayerParams:
    return FusingLayerParams(
        norm1=init_norm(store, f"{prefix}.norm1", c),
        attn=init_attention(store, f"{prefix}.attn", c),
        sr=init_spatial_reduction(store, f"{prefix}", c, pool, n_key_scales),
        norm2=init_norm(store, f"{prefix}.norm2", c),
        ffn=init_ffn(store, f"{prefix}.ffn", c, ratio, convolutional=True),
    )
