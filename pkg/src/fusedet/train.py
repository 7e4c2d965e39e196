"""Seed-deterministic training loop: AdamW, step-drop schedule, flip
augmentation, per-epoch CSV logging, final/best checkpoints.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, flip_sample
from .model import Detector
from .optim import AdamWState, adamw_step, clip_global_norm
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_cls", "l_bbox", "l_awr", "l_token", "l_total", "lr")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    clip_norm: float = 0.1
    lr_drop_frac: float = 0.8   # drop point as a fraction of the schedule
    lr_drop_factor: float = 0.1
    flip_augment: bool = True

    def __post_init__(self):
        if min(self.lr, self.epochs, self.batch_size) <= 0:
            raise ValueError("lr, epochs and batch_size must be positive")
        if not 0 < self.lr_drop_frac <= 1:
            raise ValueError("lr_drop_frac must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        drop_epoch = int(self.epochs * self.lr_drop_frac)
        return self.lr * (self.lr_drop_factor if epoch >= drop_epoch else 1.0)


def train(model: Detector, dataset: Dataset, cfg: TrainConfig, out_dir) -> list:
    """Returns the per-epoch log rows (also written to train_log.csv)."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    params = model.store.parameters()
    state = AdamWState()
    rows = []
    best = float("inf")
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        term_sums = {k: 0.0 for k in ("l_cls", "l_bbox", "l_awr", "l_token", "l_total")}
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [dataset.samples[i] for i in idx]
            if cfg.flip_augment:
                flips = rng.random(len(batch)) < 0.5
                batch = [flip_sample(s) if f else s for s, f in zip(batch, flips)]
            images = Tensor(np.stack([s.image for s in batch]))
            targets = [{"labels": s.labels, "boxes": s.boxes, "masks": s.masks}
                       for s in batch]
            model.store.zero_grad()
            with Tape() as tape:
                lo = model.loss(model.forward(images), targets)
                tape.backward(lo.total)
            clip_global_norm(params, cfg.clip_norm)
            adamw_step(params, state, lr=lr, betas=cfg.betas,
                       weight_decay=cfg.weight_decay)
            for k in term_sums:
                term_sums[k] += lo.terms[k]
            n_steps += 1
        row = {"epoch": epoch, **{k: v / n_steps for k, v in term_sums.items()},
               "lr": lr}
        rows.append(row)
        log.info("epoch %d: total %.4f lr %.2e", epoch, row["l_total"], lr)
        if row["l_total"] < best:
            best = row["l_total"]
            save_checkpoint(os.path.join(out_dir, "best.ckpt"), model.store)
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model.store)
    write_log_csv(rows, os.path.join(out_dir, "train_log.csv"))
    return rows


def write_log_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['l_cls']:.9f},{r['l_bbox']:.9f},"
                     f"{r['l_awr']:.9f},{r['l_token']:.9f},{r['l_total']:.9f},"
                     f"{r['lr']:.6e}\n")


def smoothed_total(rows, window: int = 5) -> list:
    """Moving average of the total loss (trailing window)."""
    totals = [r["l_total"] for r in rows]
    out = []
    for i in range(len(totals)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(totals[lo:i + 1])))
    return out
