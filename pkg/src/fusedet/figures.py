"""Figure rendering for the report paths; every chart lands next to its CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import SIZE_CLASSES


def save_training_curves(rows, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = [r["epoch"] for r in rows]
    for key in ("l_cls", "l_bbox", "l_awr", "l_token"):
        ax1.plot(epochs, [r[key] for r in rows], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss term")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["l_total"] for r in rows], color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("total loss")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_scaling_chart(rows, path) -> None:
    s = [r.s for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(s, [r.counted_ceca for r in rows], "o-", label="counted (fused keys)")
    ax.plot(s, [r.formula_ceca for r in rows], "s--", label="formula: single query")
    ax.plot(s, [r.formula_dense for r in rows], "^--", label="formula: dense fusion")
    ax.set_xlabel("number of fused scales S")
    ax.set_ylabel("FLOPs")
    ax.set_yscale("log")
    ax.set_xticks(s)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_chart(rows, path) -> None:
    mean_rows = [r for r in rows if r["layer"] == "mean"]
    if not mean_rows:
        return
    strides = sorted({r["stride"] for r in mean_rows})
    sizes = [s for s in SIZE_CLASSES
             if any(r["size_class"] == s for r in mean_rows)]
    width = 0.8 / max(len(sizes), 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    xs = np.arange(len(strides))
    for i, size in enumerate(sizes):
        vals = []
        for st in strides:
            match = [r["attention_mass"] for r in mean_rows
                     if r["size_class"] == size and r["stride"] == st]
            vals.append(match[0] if match else 0.0)
        ax.bar(xs + i * width, vals, width, label=size)
    ax.set_xticks(xs + width * (len(sizes) - 1) / 2)
    ax.set_xticklabels([f"stride {s}" for s in strides])
    ax.set_ylabel("attention mass")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
