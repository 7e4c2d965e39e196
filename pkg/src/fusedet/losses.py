"""Bipartite matching and the detection loss terms: focal classification,
L1 + generalized-IoU box regression, quality-branch BCE, and dense token
labeling against interpolated masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .decoder import compute_centerness
from .tensor import Tensor

EPS_PROB = 1e-7  # probability clamp for all log terms


@dataclass
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box needs positive width and height")

    def corners(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class MatchAssignment:
    """Injective query->target pairing; exactly one pair per ground-truth box."""
    pairs: list  # [(query, target), ...] ascending in query index
    n_queries: int

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    aware: float = 1.0
    token: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou, self.aware, self.token) < 0:
            raise ValueError("loss weights must be nonnegative")


# -- box overlap (numpy, used for costs / eval / aware targets) --------------


def cxcywh_to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def iou_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes, broadcasting: (..., 4) x (..., 4) -> (...)."""
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iou_v = iou_corners(a, b)
    hx1 = np.minimum(a[..., 0], b[..., 0])
    hy1 = np.minimum(a[..., 1], b[..., 1])
    hx2 = np.maximum(a[..., 2], b[..., 2])
    hy2 = np.maximum(a[..., 3], b[..., 3])
    hull = (hx2 - hx1) * (hy2 - hy1)
    inter_x = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    inter_y = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter_x * inter_y
    return np.where(hull > 0, iou_v - (hull - union) / np.where(hull > 0, hull, 1.0), iou_v)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_corners(np.array(a.corners()), np.array(b.corners())))


def giou(a: BBox, b: BBox) -> float:
    return float(giou_corners(np.array(a.corners()), np.array(b.corners())))


# -- differentiable box terms -------------------------------------------------


def giou_tensor(pred_cxcywh: Tensor, target_corners: np.ndarray) -> Tensor:
    """GIoU of predicted boxes (tape) against constant target corner boxes."""
    cx, cy = pred_cxcywh[:, 0], pred_cxcywh[:, 1]
    hw, hh = T.mul(pred_cxcywh[:, 2], Tensor(0.5)), T.mul(pred_cxcywh[:, 3], Tensor(0.5))
    px1, py1 = T.sub(cx, hw), T.sub(cy, hh)
    px2, py2 = T.add(cx, hw), T.add(cy, hh)
    tx1, ty1, tx2, ty2 = (Tensor(target_corners[:, i]) for i in range(4))
    zero = Tensor(0.0)
    ix = T.maximum(T.sub(T.minimum(px2, tx2), T.maximum(px1, tx1)), zero)
    iy = T.maximum(T.sub(T.minimum(py2, ty2), T.maximum(py1, ty1)), zero)
    inter = T.mul(ix, iy)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_t = Tensor((target_corners[:, 2] - target_corners[:, 0])
                    * (target_corners[:, 3] - target_corners[:, 1]))
    union = T.sub(T.add(area_p, area_t), inter)
    iou_v = T.div(inter, union)
    hx = T.sub(T.maximum(px2, tx2), T.minimum(px1, tx1))
    hy = T.sub(T.maximum(py2, ty2), T.minimum(py1, ty1))
    hull = T.mul(hx, hy)
    return T.sub(iou_v, T.div(T.sub(hull, union), hull))


def focal_loss(p: Tensor, t, gamma: float = 2.0, alpha_f: float = 0.25) -> Tensor:
    """Soft-target focal term, elementwise: -a*|t-p|^g*(t ln p + (1-t) ln(1-p))."""
    t = Tensor(np.asarray(t, dtype=np.float64)) if not isinstance(t, Tensor) else t
    pc = T.clip(p, EPS_PROB, 1.0 - EPS_PROB)
    bce = T.neg(T.add(T.mul(t, T.log(pc)),
                      T.mul(T.sub(Tensor(1.0), t), T.log(T.sub(Tensor(1.0), pc)))))
    mod = T.pow_const(T.absolute(T.sub(t, pc)), gamma) if gamma != 0 else Tensor(1.0)
    return T.mul(T.mul(mod, bce), Tensor(alpha_f))


def bce_loss(p: Tensor, t: np.ndarray) -> Tensor:
    pc = T.clip(p, EPS_PROB, 1.0 - EPS_PROB)
    tt = Tensor(np.asarray(t, dtype=np.float64))
    return T.neg(T.add(T.mul(tt, T.log(pc)),
                       T.mul(T.sub(Tensor(1.0), tt), T.log(T.sub(Tensor(1.0), pc)))))


# -- bipartite matching -------------------------------------------------------


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment of targets to queries.

    Ties between optimal assignments break toward the lowest (query, target)
    pair order: the optimum containing the lexicographically smallest sorted
    pair list is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, b = cost.shape
    if b == 0:
        return MatchAssignment(pairs=[], n_queries=n)
    if n < b:
        raise ValueError(f"need at least as many queries as targets ({n} < {b})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching cost must be finite")
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))
    pairs = []
    remaining = list(range(b))
    q_floor = 0
    budget = best
    while remaining:
        fixed = False
        need_rest = len(remaining) - 1
        for q in range(q_floor, n - need_rest):
            for t in remaining:
                sub_rows = np.arange(q + 1, n)
                sub_cols = [c for c in remaining if c != t]
                if sub_cols:
                    sub = cost[np.ix_(sub_rows, sub_cols)]
                    r2, c2 = linear_sum_assignment(sub)
                    sub_best = float(sub[r2, c2].sum())
                else:
                    sub_best = 0.0
                if cost[q, t] + sub_best <= budget + tol:
                    pairs.append((q, t))
                    remaining.remove(t)
                    budget = sub_best
                    q_floor = q + 1
                    fixed = True
                    break
            if fixed:
                break
        if not fixed:
            # tolerance starvation cannot happen for finite costs; fall back
            pairs.extend((int(r), int(c)) for r, c in zip(rows, cols)
                         if c in remaining)
            pairs.sort()
            break
    return MatchAssignment(pairs=pairs, n_queries=n)


def matching_cost(cls_prob: np.ndarray, boxes: np.ndarray,
                  target_labels: np.ndarray, target_boxes: np.ndarray,
                  w_cls: float = 2.0, w_l1: float = 5.0,
                  w_giou: float = 2.0) -> np.ndarray:
    """Assignment cost (N queries x B targets): class score, L1 and GIoU terms."""
    b = len(target_labels)
    n = cls_prob.shape[0]
    if b == 0:
        return np.zeros((n, 0))
    cost_cls = -cls_prob[:, np.asarray(target_labels, dtype=np.int64)]
    cost_l1 = np.abs(boxes[:, None, :] - target_boxes[None, :, :]).sum(axis=-1)
    g = giou_corners(cxcywh_to_corners(boxes)[:, None, :],
                     cxcywh_to_corners(target_boxes)[None, :, :])
    return w_cls * cost_cls + w_l1 * cost_l1 + w_giou * (1.0 - g)


# -- loss terms (single image, single decoder layer) --------------------------


def loss_cls_bbox(layer_out, target_labels: np.ndarray, target_boxes: np.ndarray,
                  match: MatchAssignment, n_classes: int,
                  weights: LossWeights) -> tuple:
    """Focal classification over all queries plus matched-box regression.

    Returns (L_cls unweighted, L_bbox with its own l1/giou weights applied).
    """
    n = layer_out.cls_logits.shape[-2]
    b = len(target_labels)
    tmat = np.zeros((n, n_classes))
    if b:
        tmat[match.query_indices, np.asarray(target_labels)[match.target_indices]] = 1.0
    p = T.sigmoid(layer_out.cls_logits)
    l_cls = T.div(T.tsum(focal_loss(p, tmat)), Tensor(float(max(b, 1))))
    if b == 0:
        return l_cls, Tensor(0.0)
    pred = layer_out.boxes[match.query_indices]
    tgt = np.asarray(target_boxes)[match.target_indices]
    l1 = T.tmean(T.tsum(T.absolute(T.sub(pred, Tensor(tgt))), axis=-1))
    g = giou_tensor(pred, cxcywh_to_corners(tgt))
    l_giou = T.tmean(T.sub(Tensor(1.0), g))
    l_bbox = T.add(T.mul(l1, Tensor(weights.l1)), T.mul(l_giou, Tensor(weights.giou)))
    return l_cls, l_bbox


def aware_targets(pred_boxes: np.ndarray, target_boxes: np.ndarray,
                  match: MatchAssignment, refs: np.ndarray | None) -> tuple:
    """Constant supervision for the quality branches: realized IoU per matched
    pair, and centerness of the query's reference point in its target box."""
    qi, ti = match.query_indices, match.target_indices
    pc = cxcywh_to_corners(pred_boxes[qi])
    tc = cxcywh_to_corners(np.asarray(target_boxes)[ti])
    iou_t = iou_corners(pc, tc)
    ctr_t = None
    if refs is not None:
        ctr_t = np.array([compute_centerness(refs[q], tc[j])
                          for j, q in enumerate(qi)])
    return iou_t, ctr_t


def loss_aware(layer_out, match: MatchAssignment, iou_t: np.ndarray,
               ctr_t: np.ndarray | None) -> Tensor:
    """Mean BCE of the matched quality logits against their frozen targets."""
    b = len(match.pairs)
    if b == 0:
        return Tensor(0.0)
    qi = match.query_indices
    p_iou = T.sigmoid(layer_out.iou_logit[qi])
    total = T.tsum(bce_loss(p_iou, iou_t))
    if ctr_t is not None:
        p_ctr = T.sigmoid(layer_out.ctr_logit[qi])
        total = T.add(total, T.tsum(bce_loss(p_ctr, ctr_t)))
    return T.div(total, Tensor(float(b)))


def soft_token_labels(masks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Interpolate the (K, H, W) mask stack to a (h*w, K) soft-label grid."""
    t = T.interpolate_bilinear(Tensor(masks), (h, w)).data
    k = t.shape[0]
    return t.reshape(k, h * w).T


def loss_token(maps: list, token_w: Tensor, token_b: Tensor,
               masks: np.ndarray, n_boxes: int) -> Tensor:
    """Dense soft-focal over every scale, position and class, divided by max(B,1)."""
    if masks is None:
        return Tensor(0.0)
    from .attention import linear
    total = Tensor(0.0)
    for m in maps:
        t = soft_token_labels(masks, m.h, m.w)
        p = T.sigmoid(linear(m.tokens, token_w, token_b))
        total = T.add(total, T.tsum(focal_loss(p, t)))
    return T.div(total, Tensor(float(max(n_boxes, 1))))


def total_loss(l_cls: Tensor, l_bbox: Tensor, l_awr: Tensor, l_token: Tensor,
               weights: LossWeights) -> Tensor:
    """Weighted sum; l_bbox already carries its own l1/giou weights."""
    out = T.add(T.mul(l_cls, Tensor(weights.cls)), l_bbox)
    out = T.add(out, T.mul(l_awr, Tensor(weights.aware)))
    return T.add(out, T.mul(l_token, Tensor(weights.token)))
