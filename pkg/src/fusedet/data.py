"""Synthetic two-class shape benchmark: axis-aligned rectangles and disks on a
plain background, with boxes, class ids and per-class 0-1 masks.

Layout of a dataset directory:
  images.bin        tensor records "img{i:05d}" of shape (3, S, S) in [0, 1]
  masks.bin         tensor records "msk{i:05d}" of shape (K, S, S), values 0/1
  annotations.jsonl one line per image: {"id", "boxes" (cxcywh), "labels"}
  meta.json         n, image_size, classes, seed
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import iter_records, write_record

CLASS_NAMES = ("rectangle", "disk")
MIN_COLOR_DIST = 0.25
MAX_BOX_OVERLAP = 0.1


@dataclass
class Sample:
    image: np.ndarray   # (3, S, S)
    boxes: np.ndarray   # (B, 4) cxcywh, normalized
    labels: np.ndarray  # (B,)
    masks: np.ndarray   # (K, S, S)


def _pick_color(rng, away_from):
    while True:
        c = rng.uniform(0.0, 1.0, 3)
        if all(np.linalg.norm(c - o) >= MIN_COLOR_DIST for o in away_from):
            return c


def _boxes_overlap(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    ua = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / ua if ua > 0 else 0.0


def make_sample(rng: np.random.Generator, image_size: int,
                k_classes: int = 2) -> Sample:
    s = image_size
    bg = rng.uniform(0.0, 1.0, 3)
    image = np.broadcast_to(bg[:, None, None], (3, s, s)).copy()
    image += rng.normal(0.0, 0.01, (3, s, s))
    masks = np.zeros((k_classes, s, s))
    boxes, labels = [], []
    n_obj = int(rng.integers(1, 4))
    px = (np.arange(s) + 0.5) / s
    gx, gy = np.meshgrid(px, px, indexing="xy")
    colors = [bg]
    for _ in range(n_obj):
        for _attempt in range(50):
            w, h = rng.uniform(0.18, 0.5, 2)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            corners = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            prev = [(b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)
                    for b in boxes]
            if all(_boxes_overlap(corners, p) <= MAX_BOX_OVERLAP for p in prev):
                break
        else:
            continue
        cls = int(rng.integers(0, k_classes))
        if cls == 0:
            inside = ((np.abs(gx - cx) <= w / 2) & (np.abs(gy - cy) <= h / 2))
        else:
            inside = (((gx - cx) / (w / 2)) ** 2 + ((gy - cy) / (h / 2)) ** 2) <= 1.0
        color = _pick_color(rng, colors)
        colors.append(color)
        image[:, inside] = color[:, None]
        masks[cls][inside] = 1.0
        boxes.append([cx, cy, w, h])
        labels.append(cls)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=image, boxes=np.array(boxes).reshape(len(boxes), 4),
                  labels=np.array(labels, dtype=np.int64), masks=masks)


def gen_synthetic_dataset(n: int, image_size: int, seed: int, out_dir,
                          k_classes: int = 2) -> None:
    """Write a deterministic dataset; identical seeds give byte-identical files."""
    if n < 1:
        raise ValueError("need at least one sample")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    img_path = os.path.join(out_dir, "images.bin")
    msk_path = os.path.join(out_dir, "masks.bin")
    ann_path = os.path.join(out_dir, "annotations.jsonl")
    with open(img_path, "wb") as fi, open(msk_path, "wb") as fm, \
            open(ann_path, "w") as fa:
        for i in range(n):
            smp = make_sample(rng, image_size, k_classes)
            write_record(fi, f"img{i:05d}", smp.image)
            write_record(fm, f"msk{i:05d}", smp.masks)
            fa.write(json.dumps({"id": i, "boxes": smp.boxes.tolist(),
                                 "labels": smp.labels.tolist()},
                                separators=(",", ":")) + "\n")
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump({"n": n, "image_size": image_size,
                   "classes": list(CLASS_NAMES[:k_classes]), "seed": seed}, fh)


@dataclass
class Dataset:
    samples: list
    image_size: int
    k_classes: int

    def __len__(self):
        return len(self.samples)


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    images = {name: arr for name, arr in iter_records(os.path.join(path, "images.bin"))}
    masks = {name: arr for name, arr in iter_records(os.path.join(path, "masks.bin"))}
    samples = []
    with open(os.path.join(path, "annotations.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            i = rec["id"]
            samples.append(Sample(
                image=images[f"img{i:05d}"],
                boxes=np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                labels=np.array(rec["labels"], dtype=np.int64),
                masks=masks[f"msk{i:05d}"]))
    return Dataset(samples=samples, image_size=meta["image_size"],
                   k_classes=len(meta["classes"]))


def flip_sample(smp: Sample) -> Sample:
    """Horizontal flip of image, masks and box centers (train-time augmentation)."""
    boxes = smp.boxes.copy()
    if len(boxes):
        boxes[:, 0] = 1.0 - boxes[:, 0]
    return Sample(image=smp.image[:, :, ::-1].copy(), boxes=boxes,
                  labels=smp.labels.copy(), masks=smp.masks[:, :, ::-1].copy())
