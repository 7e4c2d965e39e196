"""Detection evaluation (simplified COCO protocol) and the per-scale
cross-attention report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .losses import cxcywh_to_corners, hungarian_match, iou_corners, matching_cost
from .tensor import Tensor

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))
N_INTERP = 101
SIZE_CLASSES = ("small", "medium", "large")
# COCO pixel-area cutoffs 32^2 / 96^2, defined at a 640px reference side and
# rescaled proportionally to the benchmark image size.
REFERENCE_SIDE = 640


def size_thresholds(image_size: int) -> tuple:
    scale = (image_size / REFERENCE_SIDE) ** 2
    return 32 ** 2 * scale, 96 ** 2 * scale


def size_class(area_px: float, image_size: int) -> str:
    lo, hi = size_thresholds(image_size)
    if area_px < lo:
        return "small"
    if area_px <= hi:
        return "medium"
    return "large"


@dataclass
class EvalResult:
    ap: float                      # mean AP over IoU 0.50:0.05:0.95
    ap50: float
    ap75: float
    per_class: dict = field(default_factory=dict)   # class id -> mean AP
    per_size: dict = field(default_factory=dict)    # size class -> mean AP

    def rows(self):
        out = [("ap", self.ap), ("ap50", self.ap50), ("ap75", self.ap75)]
        out += [(f"ap_class_{k}", v) for k, v in sorted(self.per_class.items())]
        out += [(f"ap_{k}", v) for k, v in self.per_size.items()]
        return out


def _interp_ap(scores, tp_flags, n_targets) -> float:
    """Area under the interpolated precision-recall curve (101 points)."""
    if n_targets == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_targets
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope, then sample the recall grid
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    grid = np.linspace(0.0, 1.0, N_INTERP)
    idx = np.searchsorted(recall, grid, side="left")
    pg = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(pg.mean())


def _match_greedy(dets, gt_boxes, gt_ignore, thr):
    """Greedy score-order matching; returns per-detection (tp, ignored) flags."""
    used = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(dets))
    ignored = np.zeros(len(dets), dtype=bool)
    gt_c = cxcywh_to_corners(gt_boxes) if len(gt_boxes) else np.zeros((0, 4))
    for di, det in enumerate(dets):
        if len(gt_boxes) == 0:
            continue
        box = np.asarray(det, dtype=np.float64)
        ious = iou_corners(box[None, :], gt_c)
        best, best_iou = -1, thr
        # prefer non-ignored targets; fall back to ignored ones
        for j in np.argsort(-ious):
            if ious[j] < thr:
                break
            if used[j] or gt_ignore[j]:
                continue
            best, best_iou = j, ious[j]
            break
        if best >= 0:
            used[best] = True
            tp[di] = 1.0
            continue
        j = int(np.argmax(ious)) if len(ious) else -1
        if j >= 0 and ious[j] >= thr and gt_ignore[j]:
            ignored[di] = True
    return tp, ignored


def evaluate_ap(detections, targets, image_size: int, k_classes: int) -> EvalResult:
    """AP of per-image ranked detections against ground truth.

    `detections`: per image, list of (class_id, score, corner box in pixels).
    `targets`: per image, dict(labels, boxes cxcywh normalized).
    """
    lo_thr, hi_thr = size_thresholds(image_size)

    def ap_for(threshold, cls, size_sel=None):
        scores, tps = [], []
        n_targets = 0
        for dets, tgt in zip(detections, targets):
            labels = np.asarray(tgt["labels"], dtype=np.int64)
            boxes = np.asarray(tgt["boxes"], dtype=np.float64).reshape(len(labels), 4)
            boxes_px = boxes * image_size
            sel = labels == cls
            areas = boxes_px[:, 2] * boxes_px[:, 3]
            if size_sel is None:
                ignore = ~sel
            else:
                in_size = np.array([size_class(a, image_size) == size_sel
                                    for a in areas])
                ignore = ~(sel & in_size)
            n_targets += int((~ignore).sum())
            cand = [d for d in dets if d[0] == cls]
            det_boxes = [d[2] for d in cand]
            tp, ign = _match_greedy(det_boxes, boxes_px, ignore, threshold)
            if size_sel is not None:
                # drop unmatched detections whose own size is out of range
                for di, d in enumerate(cand):
                    if tp[di] or ign[di]:
                        continue
                    x1, y1, x2, y2 = d[2]
                    if size_class(max(x2 - x1, 0) * max(y2 - y1, 0),
                                  image_size) != size_sel:
                        ign[di] = True
            for di, d in enumerate(cand):
                if not ign[di]:
                    scores.append(d[1])
                    tps.append(tp[di])
        return _interp_ap(scores, tps, n_targets)

    per_class = {}
    ap50s, ap75s, aps = [], [], []
    for cls in range(k_classes):
        vals = [ap_for(t, cls) for t in IOU_THRESHOLDS]
        if all(np.isnan(v) for v in vals):
            continue
        per_class[cls] = float(np.nanmean(vals))
        aps.append(per_class[cls])
        ap50s.append(vals[0])
        ap75s.append(vals[5])
    per_size = {}
    for size_name in SIZE_CLASSES:
        vals = []
        for cls in range(k_classes):
            vv = [ap_for(t, cls, size_sel=size_name) for t in IOU_THRESHOLDS]
            if not all(np.isnan(v) for v in vv):
                vals.append(float(np.nanmean(vv)))
        if vals:
            per_size[size_name] = float(np.mean(vals))
    return EvalResult(
        ap=float(np.mean(aps)) if aps else 0.0,
        ap50=float(np.mean(ap50s)) if ap50s else 0.0,
        ap75=float(np.mean(ap75s)) if ap75s else 0.0,
        per_class=per_class, per_size=per_size)


def evaluate_model(model, dataset: Dataset, top_k: int = 100,
                   batch: int = 16) -> EvalResult:
    detections, targets = [], []
    for start in range(0, len(dataset), batch):
        chunk = dataset.samples[start:start + batch]
        imgs = Tensor(np.stack([s.image for s in chunk]))
        for smp, dets in zip(chunk, model.detect(imgs, top_k=top_k)):
            detections.append([(d.class_id, d.score, d.box) for d in dets])
            targets.append({"labels": smp.labels, "boxes": smp.boxes})
    return evaluate_ap(detections, targets, dataset.image_size,
                       model.cfg.decoder.n_classes)


# -- per-scale attention report ----------------------------------------------


def attention_scale_report(model, dataset: Dataset, n_images: int = 100) -> list:
    """Average cross-attention mass per memory scale for matched queries,
    broken down by decoder layer and object size class.

    Returns rows: dict(layer, size_class, scale, stride, attention_mass);
    layer is 1-based, plus a "mean" row averaged over layers.
    """
    img_size = dataset.image_size
    acc: dict = {}
    counts: dict = {}
    mem_meta = None
    for smp in dataset.samples[:n_images]:
        if len(smp.labels) == 0:
            continue
        out = model.forward(Tensor(smp.image), collect_attn=True)
        if len(out.memory_maps) < 2:
            raise ValueError("attention report needs a multi-scale memory; "
                             "rebuild the model in multi-scale mode")
        if mem_meta is None:
            mem_meta = [(m.stride, m.h * m.w) for m in out.memory_maps]
        last = out.decoder.layers[-1]
        cost = matching_cost(1.0 / (1.0 + np.exp(-last.cls_logits.data)),
                             last.boxes.data, smp.labels, smp.boxes,
                             w_cls=model.cfg.weights.cls,
                             w_l1=model.cfg.weights.l1,
                             w_giou=model.cfg.weights.giou)
        match = hungarian_match(cost)
        seg = np.cumsum([0] + [c for _, c in mem_meta])
        for q, t in match.pairs:
            area = np.prod(smp.boxes[t, 2:] * img_size)
            size = size_class(float(area), img_size)
            for li, attn in enumerate(out.cross_attn):
                row = attn.mean(axis=0)[q]  # average heads, pick the query row
                masses = np.array([row[seg[i]:seg[i + 1]].sum()
                                   for i in range(len(mem_meta))])
                key = (li, size)
                acc[key] = acc.get(key, 0.0) + masses
                counts[key] = counts.get(key, 0) + 1
    rows = []
    if mem_meta is None:
        return rows
    n_layers = len(model.decoder.layers)
    for size in SIZE_CLASSES:
        layer_masses = []
        for li in range(n_layers):
            key = (li, size)
            if key not in counts:
                continue
            masses = acc[key] / counts[key]
            layer_masses.append(masses)
            for si, (stride, _) in enumerate(mem_meta):
                rows.append({"layer": li + 1, "size_class": size, "scale": si + 1,
                             "stride": stride, "attention_mass": float(masses[si])})
        if layer_masses:
            mean_mass = np.mean(layer_masses, axis=0)
            for si, (stride, _) in enumerate(mem_meta):
                rows.append({"layer": "mean", "size_class": size, "scale": si + 1,
                             "stride": stride,
                             "attention_mass": float(mean_mass[si])})
    return rows


def write_attention_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("layer,size_class,scale,stride,attention_mass\n")
        for r in rows:
            fh.write(f"{r['layer']},{r['size_class']},{r['scale']},"
                     f"{r['stride']},{r['attention_mass']:.9f}\n")


def write_eval_csv(result: EvalResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for k, v in result.rows():
            fh.write(f"{k},{v:.6f}\n")
