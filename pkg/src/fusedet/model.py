"""Full detector: backbone + decoder + heads, loss assembly, and gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import counting
from . import tensor as T
from .backbone import (BackboneParams, FeaturePyramid, PyramidConfig,
                       backbone_forward, extra_scale, init_backbone,
                       init_extra_scale)
from .decoder import (DecoderConfig, DecoderOutput, init_decoder, decoder_forward,
                      postprocess)
from .losses import (LossWeights, MatchAssignment, aware_targets, hungarian_match,
                     loss_aware, loss_cls_bbox, loss_token, matching_cost,
                     total_loss)
from .params import ParamStore
from .tensor import Tensor


@dataclass
class DetectorConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    multi_scale: bool = True     # concat selected scales as memory; else last only
    no_fusion: bool = False      # ablation: bypass cross-scale fusion blocks
    aware_loss: bool = True
    token_labeling: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.decoder.width != self.pyramid.fuse_width:
            raise ValueError("decoder width must equal the fused-map width")
        if self.multi_scale and self.decoder.memory_strides is None:
            strides = self.pyramid.strides()
            mem = [s for s in strides if s >= strides[0] * 2] + [strides[-1] * 2]
            self.decoder.memory_strides = tuple(mem)
        if not self.multi_scale:
            if self.decoder.centerness or self.decoder.beta != 0:
                # single-scale mode pins beta = 0 (no meaningful reference points)
                self.decoder.beta = 0.0
                self.decoder.centerness = False

    @property
    def needs_extra_scale(self) -> bool:
        if not self.multi_scale or self.decoder.memory_strides is None:
            return False
        return max(self.decoder.memory_strides) > self.pyramid.strides()[-1]


@dataclass
class ForwardOut:
    pyramid: FeaturePyramid
    memory_maps: list
    decoder: DecoderOutput
    cross_attn: list | None  # per decoder layer, softmax weights (numpy)


@dataclass
class LossOut:
    total: Tensor
    terms: dict          # weighted scalar contributions, sum == total
    frozen: dict         # matches and quality-branch targets, reusable


class Detector:
    """Owns the parameter store and wires the pipeline together."""

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self.store = ParamStore(seed=cfg.seed)
        self.backbone = init_backbone(self.store, cfg.pyramid)
        self.extra = (init_extra_scale(self.store, cfg.pyramid.fuse_width)
                      if cfg.needs_extra_scale else None)
        n_mem = (len(cfg.decoder.memory_strides)
                 if cfg.multi_scale and cfg.decoder.memory_strides else 1)
        self.decoder = init_decoder(self.store, cfg.decoder, n_memory_scales=n_mem,
                                    with_refs=cfg.decoder.centerness)
        self.token_w = self.store.weight("token.w",
                                         (cfg.pyramid.fuse_width, cfg.decoder.n_classes))
        self.token_b = self.store.zeros("token.b", (cfg.decoder.n_classes,))

    # -- forward ---------------------------------------------------------

    def memory_maps(self, pyramid: FeaturePyramid) -> list:
        maps = list(pyramid.maps)
        if self.extra is not None:
            maps.append(extra_scale(maps[-1], self.extra))
        if self.cfg.multi_scale and self.cfg.decoder.memory_strides:
            by_stride = {m.stride: m for m in maps}
            try:
                return [by_stride[s] for s in self.cfg.decoder.memory_strides]
            except KeyError as e:
                raise ValueError(f"no pyramid scale at stride {e.args[0]}") from None
        return [maps[-1]]

    def forward(self, images: Tensor, collect_attn: bool = False) -> ForwardOut:
        batch_shape = images.shape[:-3]
        with counting.scope("backbone"):
            pyr = backbone_forward(images, self.backbone, no_fusion=self.cfg.no_fusion)
        mem = self.memory_maps(pyr)
        rec = [] if collect_attn else None
        with counting.scope("decoder"):
            dec = decoder_forward(mem, self.decoder, recorder=rec,
                                  batch_shape=batch_shape)
        return ForwardOut(pyramid=pyr, memory_maps=mem, decoder=dec, cross_attn=rec)

    def detect(self, images: Tensor, top_k: int = 100) -> list:
        """Per-image ranked detections (inference path, no tape required)."""
        out = self.forward(images)
        batched = images.ndim == 4
        n_imgs = images.shape[0] if batched else 1
        results = []
        for b in range(n_imgs):
            if batched:
                layers = [_slice_layer(lo, b) for lo in out.decoder.layers]
                per_img = DecoderOutput(layers=layers)
            else:
                per_img = out.decoder
            results.append(postprocess(per_img, self.cfg.decoder,
                                       self.cfg.pyramid.image_size, top_k=top_k))
        return results

    # -- loss --------------------------------------------------------------

    def loss(self, out: ForwardOut, targets: list, frozen: dict | None = None) -> LossOut:
        """Deep-supervised set loss averaged over the batch.

        `targets` is one record per image: dict(labels=(B,), boxes=(B,4) cxcywh,
        masks=(K,H,W) or None).  `frozen` pins matches and quality-branch
        targets so repeated evaluations differentiate a fixed smooth function.
        """
        cfg = self.cfg
        batched = out.decoder.layers[0].cls_logits.ndim == 3
        n_imgs = out.decoder.layers[0].cls_logits.shape[0] if batched else 1
        if len(targets) != n_imgs:
            raise ValueError(f"{n_imgs} images but {len(targets)} target records")
        refs = self.decoder.queries.reference_points()
        new_frozen = {"match": {}, "iou_t": {}, "ctr_t": {}}
        zero = Tensor(0.0)
        sums = {"cls": zero, "bbox": zero, "awr": zero, "token": zero}
        for b in range(n_imgs):
            rec = targets[b]
            labels = np.asarray(rec["labels"], dtype=np.int64)
            boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(len(labels), 4)
            for li, lo in enumerate(out.decoder.layers):
                lo_b = _slice_layer(lo, b) if batched else lo
                key = (b, li)
                if frozen is not None:
                    match = frozen["match"][key]
                else:
                    cost = matching_cost(_sigmoid(lo_b.cls_logits.data),
                                         lo_b.boxes.data, labels, boxes,
                                         w_cls=cfg.weights.cls, w_l1=cfg.weights.l1,
                                         w_giou=cfg.weights.giou)
                    match = hungarian_match(cost)
                new_frozen["match"][key] = match
                l_cls, l_bbox = loss_cls_bbox(lo_b, labels, boxes, match,
                                              cfg.decoder.n_classes, cfg.weights)
                sums["cls"] = T.add(sums["cls"], l_cls)
                sums["bbox"] = T.add(sums["bbox"], l_bbox)
                if cfg.aware_loss:
                    if frozen is not None:
                        iou_t = frozen["iou_t"][key]
                        ctr_t = frozen["ctr_t"][key]
                    else:
                        iou_t, ctr_t = aware_targets(
                            lo_b.boxes.data, boxes, match,
                            refs if cfg.decoder.centerness else None)
                    new_frozen["iou_t"][key] = iou_t
                    new_frozen["ctr_t"][key] = ctr_t
                    sums["awr"] = T.add(sums["awr"], loss_aware(lo_b, match, iou_t, ctr_t))
            if cfg.token_labeling and rec.get("masks") is not None:
                maps = [_slice_map(m, b) if batched else m for m in out.pyramid.maps]
                sums["token"] = T.add(
                    sums["token"],
                    loss_token(maps, self.token_w, self.token_b,
                               np.asarray(rec["masks"], dtype=np.float64),
                               len(labels)))
        inv = Tensor(1.0 / n_imgs)
        l_cls = T.mul(sums["cls"], inv)
        l_bbox = T.mul(sums["bbox"], inv)
        l_awr = T.mul(sums["awr"], inv)
        l_token = T.mul(sums["token"], inv)
        total = total_loss(l_cls, l_bbox, l_awr, l_token, cfg.weights)
        terms = {
            "l_cls": cfg.weights.cls * float(l_cls.data),
            "l_bbox": float(l_bbox.data),
            "l_awr": cfg.weights.aware * float(l_awr.data),
            "l_token": cfg.weights.token * float(l_token.data),
            "l_total": float(total.data),
        }
        return LossOut(total=total, terms=terms, frozen=new_frozen)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _slice_layer(lo, b):
    from .decoder import LayerOutput
    return LayerOutput(y=lo.y[b], cls_logits=lo.cls_logits[b], boxes=lo.boxes[b],
                       iou_logit=lo.iou_logit[b], ctr_logit=lo.ctr_logit[b])


def _slice_map(m, b):
    from .backbone import FeatureMap
    return FeatureMap(m.idx, m.stride, m.h, m.w, m.c, m.tokens[b])


def micro_config(seed: int = 0) -> DetectorConfig:
    """Smallest full-pipeline configuration; used by the gradient checker."""
    return DetectorConfig(
        pyramid=PyramidConfig(image_size=16, channels=(4, 4, 8), depths=(1, 1, 1),
                              heads=(1, 1, 2), patch_strides=(2, 2, 2),
                              expansion=2.0, pool=2, fuse_width=8, fuse_depth=1,
                              fuse_start_lvl=1, fuse_expansion=2.0),
        decoder=DecoderConfig(layers=1, n_queries=4, width=8, heads=2,
                              expansion=2.0, memory_strides=(4, 8),
                              alpha=0.45, beta=0.05, centerness=True, n_classes=2),
        multi_scale=True, seed=seed)


def toy_config(seed: int = 0, no_fusion: bool = False) -> DetectorConfig:
    """The standard desk-scale training configuration."""
    return DetectorConfig(
        pyramid=PyramidConfig(image_size=64, channels=(16, 32, 64, 128),
                              depths=(1, 1, 1, 1), heads=(1, 2, 4, 8),
                              patch_strides=(4, 2, 2, 2), expansion=4.0, pool=7,
                              fuse_width=32, fuse_depth=2, fuse_start_lvl=1,
                              fuse_expansion=4.0),
        decoder=DecoderConfig(layers=3, n_queries=25, width=32, heads=4,
                              expansion=4.0, alpha=0.45, beta=0.05,
                              centerness=True, n_classes=2),
        multi_scale=True, no_fusion=no_fusion, seed=seed)


def grad_check_model(model: Detector, images: np.ndarray, targets: list,
                     h: float = 1e-5) -> dict:
    """Finite-difference check of the full loss with matching and quality
    targets frozen at the base point (the tape differentiates exactly that
    fixed function)."""
    imgs = Tensor(np.asarray(images, dtype=np.float64))
    base = model.loss(model.forward(imgs), targets)
    frozen = base.frozen

    def f():
        return model.loss(model.forward(imgs), targets, frozen=frozen).total

    return T.finite_diff_report(f, model.store.parameters(), h=h)
