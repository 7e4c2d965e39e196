"""Two-stream pyramid backbone: intra-scale transformer stages produce a
shrinking pyramid while parallel fusing stages cross-attend each new scale to
every previously fused one, yielding fine-fused maps at a common width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import counting
from . import tensor as T
from .attention import (AttentionConfig, AttentionParams, FusingLayerParams,
                        NormParams, SRABlockParams, fusing_layer, grid_to_tokens,
                        init_fusing_layer, init_norm, init_sra_block, linear,
                        norm, sra_block, tokens_to_grid)
from .params import ParamStore
from .tensor import Tensor


@dataclass
class FeatureMap:
    """One scale of the pyramid; tokens are (..., h*w, c)."""
    idx: int          # 1-based scale index
    stride: int       # image pixels per grid cell
    h: int
    w: int
    c: int
    tokens: Tensor

    def with_tokens(self, t: Tensor) -> "FeatureMap":
        return FeatureMap(self.idx, self.stride, self.h, self.w, t.shape[-1], t)

    def grid(self) -> Tensor:
        return tokens_to_grid(self.tokens, self.h, self.w)


@dataclass
class FeaturePyramid:
    """Fused maps in strictly stride-ascending order, all at one width."""
    maps: list

    def __post_init__(self):
        strides = [m.stride for m in self.maps]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"pyramid strides must strictly increase: {strides}")
        widths = {m.c for m in self.maps}
        if len(widths) > 1:
            raise ValueError(f"pyramid widths differ: {widths}")

    def __iter__(self):
        return iter(self.maps)

    def __len__(self):
        return len(self.maps)

    def by_stride(self, stride: int) -> FeatureMap:
        for m in self.maps:
            if m.stride == stride:
                return m
        raise KeyError(f"no pyramid map at stride {stride}")


@dataclass
class PyramidConfig:
    image_size: int = 64
    channels: tuple = (16, 32, 64, 128)
    depths: tuple = (1, 1, 1, 1)
    heads: tuple = (1, 2, 4, 8)
    patch_strides: tuple = (4, 2, 2, 2)
    expansion: float = 4.0
    pool: int = 7
    fuse_width: int = 32
    fuse_depth: int = 2
    fuse_start_lvl: int = 1
    fuse_expansion: float = 4.0

    def __post_init__(self):
        n = len(self.channels)
        if not (len(self.depths) == len(self.heads) == len(self.patch_strides) == n):
            raise ValueError("per-stage tuples must have equal length")
        if not 1 <= self.fuse_start_lvl <= n:
            raise ValueError(f"fuse_start_lvl must lie in [1, {n}]")
        if any(s not in (2, 4) for s in self.patch_strides):
            raise ValueError("patch strides must be 2 or 4")

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    @property
    def n_fused(self) -> int:
        return self.n_stages - self.fuse_start_lvl + 1

    @property
    def fuse_heads(self) -> int:
        # 8 heads at width 256, scaled proportionally, never below 1.
        return max(1, round(8 * self.fuse_width / 256))

    def strides(self) -> list[int]:
        out, s = [], 1
        for ps in self.patch_strides:
            s *= ps
            out.append(s)
        return out


@dataclass
class PatchEmbedParams:
    w: Tensor
    b: Tensor
    norm: NormParams
    stride: int
    kernel: int


@dataclass
class StageParams:
    patch: PatchEmbedParams
    blocks: list
    norm: NormParams
    cfg: AttentionConfig


@dataclass
class FuseStageParams:
    proj_w: Tensor
    proj_b: Tensor
    blocks: list
    norm: NormParams


@dataclass
class BackboneParams:
    cfg: PyramidConfig
    stages: list
    fuse_stages: list   # aligned with stage indices >= fuse_start_lvl
    fuse_cfg: AttentionConfig


def init_backbone(store: ParamStore, cfg: PyramidConfig) -> BackboneParams:
    stages = []
    in_c = 3
    for i in range(cfg.n_stages):
        sid = i + 1
        c = cfg.channels[i]
        s = cfg.patch_strides[i]
        k = 2 * s - 1
        patch = PatchEmbedParams(
            w=store.weight(f"stage{sid}.patch.w", (in_c * k * k, c)),
            b=store.zeros(f"stage{sid}.patch.b", (c,)),
            norm=init_norm(store, f"stage{sid}.patch.norm", c),
            stride=s, kernel=k)
        blocks = [init_sra_block(store, f"stage{sid}.block{j + 1}", c, cfg.pool,
                                 cfg.expansion)
                  for j in range(cfg.depths[i])]
        stages.append(StageParams(patch=patch, blocks=blocks,
                                  norm=init_norm(store, f"stage{sid}.norm", c),
                                  cfg=AttentionConfig(c, cfg.heads[i])))
        in_c = c
    fuse_stages = []
    for i in range(cfg.fuse_start_lvl, cfg.n_stages + 1):
        n_keys = (i - cfg.fuse_start_lvl) + 1  # query scale + previously fused
        blocks = [init_fusing_layer(store, f"fuse{i}.block{j + 1}", cfg.fuse_width,
                                    cfg.pool, cfg.fuse_expansion, n_keys)
                  for j in range(cfg.fuse_depth)]
        fuse_stages.append(FuseStageParams(
            proj_w=store.weight(f"fuse{i}.proj.w", (cfg.channels[i - 1], cfg.fuse_width)),
            proj_b=store.zeros(f"fuse{i}.proj.b", (cfg.fuse_width,)),
            blocks=blocks,
            norm=init_norm(store, f"fuse{i}.norm", cfg.fuse_width)))
    return BackboneParams(cfg=cfg, stages=stages, fuse_stages=fuse_stages,
                          fuse_cfg=AttentionConfig(cfg.fuse_width, cfg.fuse_heads))


def patch_embed(x: Tensor, p: PatchEmbedParams, idx: int, stride_in: int) -> FeatureMap:
    """Overlapping patch embedding (kernel 2s-1, padding s-1) followed by layer norm."""
    h, w = x.shape[-2], x.shape[-1]
    cols = T.unfold(x, kernel=p.kernel, stride=p.stride, pad=p.stride - 1)
    tok = norm(linear(cols, p.w, p.b), p.norm)
    oh = (h - 1) // p.stride + 1
    ow = (w - 1) // p.stride + 1
    return FeatureMap(idx=idx, stride=stride_in * p.stride, h=oh, w=ow,
                      c=tok.shape[-1], tokens=tok)


def backbone_forward(image: Tensor, params: BackboneParams,
                     no_fusion: bool = False,
                     recorder: list | None = None) -> FeaturePyramid:
    """Run intra-scale stages plus fusing stages; returns stride-ascending fused maps.

    With `no_fusion` the fusing blocks are bypassed and each raw map is only
    projected (and normed) to the fusing width, so downstream shapes match.
    """
    cfg = params.cfg
    x = image
    fused: list[FeatureMap] = []
    stride = 1
    for i, stage in enumerate(params.stages, start=1):
        with counting.scope(f"stage{i}"):
            fmap = patch_embed(x, stage.patch, idx=i, stride_in=stride)
            stride = fmap.stride
            for blk in stage.blocks:
                fmap = sra_block(fmap, blk, stage.cfg, recorder)
            fmap = fmap.with_tokens(norm(fmap.tokens, stage.norm))
        if i >= cfg.fuse_start_lvl:
            fs = params.fuse_stages[i - cfg.fuse_start_lvl]
            with counting.scope(f"fuse{i}"):
                q = fmap.with_tokens(linear(fmap.tokens, fs.proj_w, fs.proj_b))
                if not no_fusion:
                    for blk in fs.blocks:
                        q = fusing_layer(q, fused, blk, params.fuse_cfg, recorder)
                q = q.with_tokens(norm(q.tokens, fs.norm))
            fused.append(q)
        x = fmap.grid()
    return FeaturePyramid(fused)


@dataclass
class ExtraScaleParams:
    w: Tensor
    b: Tensor


def init_extra_scale(store: ParamStore, width: int) -> ExtraScaleParams:
    return ExtraScaleParams(w=store.weight("extra.w", (width * 9, width)),
                            b=store.zeros("extra.b", (width,)))


def extra_scale(last: FeatureMap, p: ExtraScaleParams) -> FeatureMap:
    """Strided 3x3 convolution of the last fused map; doubles the stride."""
    with counting.scope("extra"):
        cols = T.unfold(last.grid(), kernel=3, stride=2, pad=1)
        tok = linear(cols, p.w, p.b)
    oh = (last.h - 1) // 2 + 1
    ow = (last.w - 1) // 2 + 1
    return FeatureMap(idx=last.idx + 1, stride=last.stride * 2, h=oh, w=ow,
                      c=tok.shape[-1], tokens=tok)
