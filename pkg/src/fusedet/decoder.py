"""Set-prediction decoder over the fused pyramid: learned object queries,
pre-norm self/cross attention layers, per-layer prediction heads (class, box,
predicted-IoU, predicted-centerness), and inference-time score fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import counting
from . import tensor as T
from .attention import (AttentionConfig, AttentionParams, FFNParams, NormParams,
                        feed_forward, init_attention, init_ffn, init_norm, linear,
                        multi_head_self_attention, norm)
from .params import ParamStore
from .tensor import Tensor


@dataclass
class DecoderConfig:
    layers: int = 3
    n_queries: int = 25
    width: int = 32
    heads: int = 4
    expansion: float = 4.0
    memory_strides: tuple | None = None   # None = last pyramid scale only
    alpha: float = 0.45
    beta: float = 0.05
    centerness: bool = True
    n_classes: int = 2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1:
            raise ValueError("need alpha >= 0, beta >= 0, alpha + beta <= 1")
        if not self.centerness and self.beta != 0:
            raise ValueError("beta must be 0 when the centerness branch is disabled")


@dataclass
class ObjectQuerySet:
    embed: Tensor                 # (N, C) learned content queries
    pos: Tensor                   # (N, C) learned positional queries
    ref_logits: Tensor | None     # (N, 2); sigmoid gives anchor points in (0,1)^2

    @property
    def n(self) -> int:
        return self.embed.shape[0]

    def reference_points(self) -> np.ndarray | None:
        if self.ref_logits is None:
            return None
        return 1.0 / (1.0 + np.exp(-self.ref_logits.data))


@dataclass
class MLPHead:
    layers: list  # [(w, b), ...] with GELU between


@dataclass
class HeadParams:
    cls_w: Tensor
    cls_b: Tensor
    box: MLPHead
    iou: MLPHead
    ctr: MLPHead


@dataclass
class DecoderLayerParams:
    norm1: NormParams
    self_attn: AttentionParams
    norm2: NormParams
    cross_attn: AttentionParams
    norm3: NormParams
    ffn: FFNParams


@dataclass
class DecoderParams:
    cfg: DecoderConfig
    queries: ObjectQuerySet
    layers: list
    heads: list             # one HeadParams per layer
    out_norm: NormParams
    level_embed: Tensor | None   # (n_memory_scales, C) in multi-scale mode


@dataclass
class LayerOutput:
    y: Tensor            # (..., N, C) normed decoder output
    cls_logits: Tensor   # (..., N, K)
    boxes: Tensor        # (..., N, 4) cxcywh in (0,1)
    iou_logit: Tensor    # (..., N)
    ctr_logit: Tensor    # (..., N)


@dataclass
class DecoderOutput:
    layers: list  # LayerOutput per decoder layer, last = final


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2) in absolute image pixels


def _mlp_head(store: ParamStore, prefix: str, c: int, hidden: int, out: int,
              depth: int) -> MLPHead:
    dims = [c] + [hidden] * (depth - 1) + [out]
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append((store.weight(f"{prefix}.w{i + 1}", (a, b)),
                       store.zeros(f"{prefix}.b{i + 1}", (b,))))
    return MLPHead(layers)


def run_mlp(x: Tensor, head: MLPHead) -> Tensor:
    for i, (w, b) in enumerate(head.layers):
        x = linear(x, w, b)
        if i + 1 < len(head.layers):
            x = T.gelu(x)
    return x


def init_decoder(store: ParamStore, cfg: DecoderConfig, n_memory_scales: int,
                 with_refs: bool) -> DecoderParams:
    c = cfg.width
    ref_logits = None
    if with_refs:
        # Anchor grid spread over the unit square (inverse-sigmoid spacing).
        side = max(1, int(math.ceil(math.sqrt(cfg.n_queries))))
        pts = []
        for i in range(cfg.n_queries):
            r, col = divmod(i, side)
            pts.append(((col + 0.5) / side, (r + 0.5) / side))
        arr = np.array(pts)
        ref_logits = store.const("query.ref_logits", np.log(arr / (1.0 - arr)))
    queries = ObjectQuerySet(
        embed=store.weight("query.embed", (cfg.n_queries, c)),
        pos=store.weight("query.pos", (cfg.n_queries, c)),
        ref_logits=ref_logits)
    layers, heads = [], []
    for i in range(cfg.layers):
        pre = f"decoder.layer{i + 1}"
        layers.append(DecoderLayerParams(
            norm1=init_norm(store, f"{pre}.norm1", c),
            self_attn=init_attention(store, f"{pre}.self_attn", c),
            norm2=init_norm(store, f"{pre}.norm2", c),
            cross_attn=init_attention(store, f"{pre}.cross_attn", c),
            norm3=init_norm(store, f"{pre}.norm3", c),
            ffn=init_ffn(store, f"{pre}.ffn", c, cfg.expansion, convolutional=False)))
        hp = f"decoder.head{i + 1}"
        heads.append(HeadParams(
            cls_w=store.weight(f"{hp}.cls.w", (c, cfg.n_classes)),
            cls_b=store.zeros(f"{hp}.cls.b", (cfg.n_classes,)),
            box=_mlp_head(store, f"{hp}.box", c, c, 4, depth=3),
            iou=_mlp_head(store, f"{hp}.iou", c, c, 1, depth=2),
            ctr=_mlp_head(store, f"{hp}.ctr", c, c, 1, depth=2)))
    level_embed = (store.weight("decoder.level_embed", (n_memory_scales, c))
                   if n_memory_scales > 1 else None)
    return DecoderParams(cfg=cfg, queries=queries, layers=layers, heads=heads,
                         out_norm=init_norm(store, "decoder.norm", c),
                         level_embed=level_embed)


def sine_position_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sine embedding for an h*w grid, (h*w, c); c must be divisible by 4."""
    if c % 4 != 0:
        raise ValueError("channel count must be divisible by 4 for 2-D sine encoding")
    half = c // 2
    dim_t = 10000.0 ** (2 * (np.arange(half) // 2) / half)
    ys = (np.arange(h) + 0.5) / h * 2 * math.pi
    xs = (np.arange(w) + 0.5) / w * 2 * math.pi
    grid_y = np.repeat(ys, w)
    grid_x = np.tile(xs, h)

    def enc(vals):
        ang = vals[:, None] / dim_t[None, :]
        out = np.empty_like(ang)
        out[:, 0::2] = np.sin(ang[:, 0::2])
        out[:, 1::2] = np.cos(ang[:, 1::2])
        return out

    return np.concatenate([enc(grid_y), enc(grid_x)], axis=1)


def build_memory(maps: list, params: DecoderParams):
    """Concatenate pyramid scales into cross-attention memory with positions.

    Returns (memory tokens, positional tokens, per-scale token counts).
    """
    if not maps:
        raise ValueError("decoder memory is empty")
    toks, poss, counts = [], [], []
    for li, m in enumerate(maps):
        toks.append(m.tokens)
        pos = sine_position_encoding(m.h, m.w, m.c)
        pos_t = Tensor(pos)
        if params.level_embed is not None:
            pos_t = T.add(pos_t, params.level_embed[li:li + 1])
        poss.append(pos_t)
        counts.append(m.h * m.w)
    memory = toks[0] if len(toks) == 1 else T.concat(toks, axis=-2)
    pos = poss[0] if len(poss) == 1 else T.concat(poss, axis=0)
    return memory, pos, counts


def decoder_layer(q: Tensor, memory: Tensor, qpos: Tensor, mpos: Tensor,
                  p: DecoderLayerParams, cfg: AttentionConfig,
                  recorder: list | None = None) -> Tensor:
    """Pre-norm residual: query self-attention, cross-attention to memory, FFN."""
    if memory.shape[-2] == 0:
        raise ValueError("decoder memory is empty")
    x = norm(q, p.norm1)
    with counting.scope("self_attn"):
        sa = multi_head_self_attention(T.add(x, qpos), T.add(x, qpos), x,
                                       p.self_attn, cfg)
    q = T.add(q, sa)
    x = norm(q, p.norm2)
    with counting.scope("cross_attn"):
        ca = multi_head_self_attention(T.add(x, qpos), T.add(memory, mpos), memory,
                                       p.cross_attn, cfg, recorder=recorder)
    q = T.add(q, ca)
    x = norm(q, p.norm3)
    with counting.scope("ffn"):
        q = T.add(q, feed_forward(x, p.ffn))
    return q


def apply_heads(y: Tensor, hp: HeadParams) -> LayerOutput:
    cls_logits = linear(y, hp.cls_w, hp.cls_b)
    boxes = T.sigmoid(run_mlp(y, hp.box))
    iou_logit = run_mlp(y, hp.iou)
    ctr_logit = run_mlp(y, hp.ctr)
    return LayerOutput(y=y, cls_logits=cls_logits, boxes=boxes,
                       iou_logit=T.reshape(iou_logit, iou_logit.shape[:-1]),
                       ctr_logit=T.reshape(ctr_logit, ctr_logit.shape[:-1]))


def decoder_forward(memory_maps: list, params: DecoderParams,
                    recorder: list | None = None,
                    batch_shape: tuple = ()) -> DecoderOutput:
    """Run all decoder layers with heads on every layer output (deep supervision)."""
    cfg = params.cfg
    attn_cfg = AttentionConfig(cfg.width, cfg.heads)
    memory, mpos, _ = build_memory(memory_maps, params)
    q = params.queries.embed
    qpos = params.queries.pos
    if batch_shape:
        ones = Tensor(np.ones(batch_shape + (1, 1)))
        q = T.mul(ones, q)  # broadcast queries across the batch
    outs = []
    for i, (lp, hp) in enumerate(zip(params.layers, params.heads)):
        with counting.scope(f"decoder{i + 1}"):
            q = decoder_layer(q, memory, qpos, mpos, lp, attn_cfg, recorder)
            y = norm(q, params.out_norm)
        with counting.scope(f"heads{i + 1}"):
            outs.append(apply_heads(y, hp))
    return DecoderOutput(layers=outs)


def compute_centerness(ref, box) -> float:
    """FCOS-style centerness of a reference point in a corner-form box; 0 outside."""
    x_r, y_r = ref
    x1, y1, x2, y2 = box
    if x2 <= x1 or y2 <= y1:
        return 0.0
    if not (x1 <= x_r <= x2 and y1 <= y_r <= y2):
        return 0.0
    lx, rx = x_r - x1, x2 - x_r
    ty, by = y_r - y1, y2 - y_r
    num = min(lx, rx) * min(ty, by)
    den = max(lx, rx) * max(ty, by)
    if den <= 0.0:
        return 0.0
    return math.sqrt(num / den)


def location_aware_score(cls_prob, iou_prob, ctr_prob, alpha: float, beta: float):
    """CLS^(1-a-b) * IoU^a * CTR^b with 0^0 = 1; inputs in [0,1]."""
    if alpha < 0 or beta < 0 or alpha + beta > 1:
        raise ValueError("need alpha >= 0, beta >= 0, alpha + beta <= 1")
    cls_prob = np.asarray(cls_prob, dtype=np.float64)
    iou_prob = np.asarray(iou_prob, dtype=np.float64)
    ctr_prob = np.asarray(ctr_prob, dtype=np.float64)
    out = cls_prob ** (1.0 - alpha - beta)
    if alpha > 0:
        out = out * iou_prob ** alpha
    if beta > 0:
        out = out * ctr_prob ** beta
    return out


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def postprocess(out: DecoderOutput, cfg: DecoderConfig, image_size: int,
                top_k: int = 100) -> list:
    """Last-layer heads to a ranked detection list; no duplicate suppression."""
    last = out.layers[-1]
    cls_prob = _np_sigmoid(last.cls_logits.data)        # (N, K)
    iou_prob = _np_sigmoid(last.iou_logit.data)         # (N,)
    if cfg.centerness and cfg.beta > 0:
        ctr_prob = _np_sigmoid(last.ctr_logit.data)
    else:
        ctr_prob = np.ones_like(iou_prob)
    scores = location_aware_score(cls_prob, iou_prob[..., None],
                                  ctr_prob[..., None], cfg.alpha, cfg.beta)
    n, k = scores.shape
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:min(top_k, flat.size)]
    boxes = last.boxes.data
    dets = []
    for idx in order:
        qi, ci = divmod(int(idx), k)
        cx, cy, w, h = boxes[qi] * image_size
        dets.append(Detection(class_id=ci, score=float(flat[idx]),
                              box=(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
    return dets
