"""Closed-form complexity formulas and counted-cost reports.

Formulas evaluate the dominant terms exactly as written, without hidden
constants; counted numbers come from the primitive hooks in `counting` and are
compared for scaling shape, not absolute magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counting
from .attention import AttentionConfig, fusing_layer, init_fusing_layer
from .backbone import FeatureMap
from .params import ParamStore
from .tensor import Tensor

FORMULA_VARIANTS = ("encoder_sa", "decoder_ca", "linear_sr", "dense_fusion", "ceca")


@dataclass
class ComplexityFormula:
    variant: str

    def __post_init__(self):
        if self.variant not in FORMULA_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; "
                             f"choose from {FORMULA_VARIANTS}")


def eval_formula(f: ComplexityFormula | str, **bindings) -> float:
    """Evaluate a dominant-term complexity expression at concrete sizes.

    encoder_sa:   H^2 W^2 C + H W C^2
    decoder_ca:   N H W C + N C^2
    linear_sr:    H W P^2 C                 (pooled-key attention, one scale)
    dense_fusion: (hw + 4hw + ... + 4^(S-1) hw) S P^2 C
    ceca:         S h w P^2 C               (single query scale, S pooled keys)
    """
    variant = f.variant if isinstance(f, ComplexityFormula) else f
    ComplexityFormula(variant)

    def need(*names):
        missing = [k for k in names if k not in bindings]
        if missing:
            raise KeyError(f"{variant} needs bindings for {missing}")
        vals = [bindings[k] for k in names]
        if any(v <= 0 for v in vals):
            raise ValueError("all bindings must be positive")
        return vals

    if variant == "encoder_sa":
        h, w, c = need("H", "W", "C")
        return float(h * h * w * w * c + h * w * c * c)
    if variant == "decoder_ca":
        n, h, w, c = need("N", "H", "W", "C")
        return float(n * h * w * c + n * c * c)
    if variant == "linear_sr":
        h, w, p, c = need("H", "W", "P", "C")
        return float(h * w * p * p * c)
    if variant == "dense_fusion":
        h, w, p, c, s = need("h", "w", "P", "C", "S")
        s = int(s)
        geom = sum(4 ** k for k in range(s))
        return float(geom * h * w * s * p * p * c)
    # ceca
    h, w, p, c, s = need("h", "w", "P", "C", "S")
    return float(int(s) * h * w * p * p * c)


@dataclass
class FlopReport:
    by_label: dict
    total: int

    def matching(self, *substrings) -> int:
        return sum(v for k, v in self.by_label.items()
                   if all(s in k for s in substrings))


def count_forward(fn, *args, **kwargs) -> FlopReport:
    """Run `fn(*args, **kwargs)` under a fresh counter; returns per-label totals."""
    with counting.FlopCounter() as c:
        fn(*args, **kwargs)
    return FlopReport(by_label=dict(c.by_label), total=c.total)


# Counted cost of the pooled-key attention core of one fusing layer: the parts
# the ceca formula models (kv projection, scores, softmax, value weighting).
_KEY_SIDE_LABELS = ("kv_proj", "scores", "softmax", "values")


def count_fusing_attention(h: int, w: int, c: int, pool: int, n_scales: int,
                           pred_sizes=None, seed: int = 0) -> dict:
    """Counted FLOPs of one fusing layer with `n_scales` key scales.

    `pred_sizes` optionally pins predecessor (h, w) grids; defaults to
    stride-doubled sizes. Returns label groups: key_side, attn_total, pool,
    layer_total.
    """
    if pred_sizes is None:
        pred_sizes = [(h * 2 ** k, w * 2 ** k) for k in range(1, n_scales)]
    if len(pred_sizes) != n_scales - 1:
        raise ValueError("need one predecessor size per extra scale")
    store = ParamStore(seed=seed)
    blk = init_fusing_layer(store, "probe", c, pool, 2.0, n_scales)
    cfg = AttentionConfig(c, max(1, c // 32))
    rng = np.random.default_rng(seed)
    query = FeatureMap(n_scales, 32, h, w, c,
                       Tensor(rng.standard_normal((h * w, c))))
    prevs = [FeatureMap(i + 1, 4, ph, pw, c,
                        Tensor(rng.standard_normal((ph * pw, c))))
             for i, (ph, pw) in enumerate(pred_sizes)]
    report = count_forward(fusing_layer, query, prevs, blk, cfg)
    key_side = sum(report.matching("attn", lbl) for lbl in _KEY_SIDE_LABELS)
    return {
        "key_side": key_side,
        "attn_total": report.matching("attn"),
        "pool": report.matching("pool"),
        "layer_total": report.total,
    }


@dataclass
class ScalingReportRow:
    s: int
    counted_ceca: int
    formula_ceca: float
    formula_dense: float

    @property
    def ratio(self) -> float:
        return self.formula_dense / self.formula_ceca


def scaling_report(h: int = 8, w: int = 8, c: int = 32, pool: int = 7,
                   s_range=range(1, 6)) -> list[ScalingReportRow]:
    """Counted key-side fusing cost and formula predictions for each scale count."""
    rows = []
    for s in s_range:
        if not 1 <= s <= 6:
            raise ValueError("S must lie in [1, 6]")
        counted = count_fusing_attention(h, w, c, pool, s)["key_side"]
        rows.append(ScalingReportRow(
            s=s, counted_ceca=counted,
            formula_ceca=eval_formula("ceca", h=h, w=w, P=pool, C=c, S=s),
            formula_dense=eval_formula("dense_fusion", h=h, w=w, P=pool, C=c, S=s)))
    return rows


def write_scaling_csv(rows: list[ScalingReportRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("S,counted_ceca,formula_ceca,formula_dense,ratio\n")
        for r in rows:
            fh.write(f"{r.s},{r.counted_ceca},{r.formula_ceca:.0f},"
                     f"{r.formula_dense:.0f},{r.ratio:.6f}\n")


def linearity_r2(xs, ys) -> float:
    """R^2 of the least-squares affine fit y ~ a + b x."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    A = np.column_stack([np.ones_like(xs), xs])
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - ss_res / ss_tot
