"""Overlap metrics, segmentation losses, and scar-volume statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .atlas import SEGMENTS, BullseyeTable
from .volume import Mask3, Volume3, check_same_geometry


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: Mask3, gt: Mask3) -> ConfusionCounts:
    check_same_geometry(pred, gt, "prediction and ground truth")
    p, g = pred.data, gt.data
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


# Empty-vs-empty comparisons count as perfect agreement; anything else with a
# zero denominator scores 0.

def dice(c: ConfusionCounts) -> float:
    d = 2 * c.tp + c.fp + c.fn
    return 1.0 if d == 0 else 2 * c.tp / d


def precision(c: ConfusionCounts) -> float:
    d = c.tp + c.fp
    if d == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / d


def sensitivity(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    if d == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / d


def specificity(c: ConfusionCounts) -> float:
    d = c.tn + c.fp
    if d == 0:
        return 1.0
    return c.tn / d


def _probs(p) -> np.ndarray:
    arr = p.data if isinstance(p, Volume3) else np.asarray(p, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return arr


def _check(p, gt: Mask3):
    if isinstance(p, Volume3):
        check_same_geometry(p, gt, "prediction and ground truth")
    elif np.shape(p) != gt.dims:
        raise ValueError(f"shape mismatch: {np.shape(p)} vs {gt.dims}")


def soft_dice_loss(p, gt: Mask3, smooth: float = 1e-5) -> float:
    """``1 - (2 sum(p g) + smooth) / (sum(p) + sum(g) + smooth)``."""
    _check(p, gt)
    pr, g = _probs(p), gt.data.astype(np.float64)
    inter = float(np.sum(pr * g))
    return 1.0 - (2.0 * inter + smooth) / (float(pr.sum()) + float(g.sum()) + smooth)


def class_weights(gt: Mask3) -> tuple[float, float]:
    """Default imbalance weights: foreground ``N_bg / N_fg``, background 1."""
    n_fg = gt.count
    n_bg = gt.data.size - n_fg
    return (n_bg / n_fg if n_fg else 1.0), 1.0


def weighted_cross_entropy_terms(p, gt: Mask3, w_fg: float | None = None, w_bg: float = 1.0,
                                 clamp: float = 1e-7) -> tuple[float, float]:
    """Foreground and background parts of the weighted BCE; they sum to the loss."""
    _check(p, gt)
    if w_fg is None:
        w_fg = class_weights(gt)[0]
    if w_fg <= 0 or w_bg <= 0:
        raise ValueError("class weights must be positive")
    pr = np.clip(_probs(p), clamp, 1.0 - clamp)
    g = gt.data
    n = g.size
    fg = -w_fg * float(np.sum(np.log(pr[g]))) / n
    bg = -w_bg * float(np.sum(np.log1p(-pr[~g]))) / n
    return fg, bg


def weighted_cross_entropy(p, gt: Mask3, w_fg: float | None = None, w_bg: float = 1.0,
                           clamp: float = 1e-7) -> float:
    fg, bg = weighted_cross_entropy_terms(p, gt, w_fg, w_bg, clamp)
    return fg + bg


def seg_loss(p, gt: Mask3, w_fg: float | None = None, w_bg: float = 1.0,
             smooth: float = 1e-5, clamp: float = 1e-7) -> float:
    """Soft Dice plus weighted cross entropy."""
    return soft_dice_loss(p, gt, smooth) + weighted_cross_entropy(p, gt, w_fg, w_bg, clamp)


def volume_ml(m: Mask3) -> float:
    return m.count * m.voxel_volume / 1000.0


def cohort_volume_stats(masks) -> tuple[float, float]:
    """Mean and population standard deviation of mask volumes (mL)."""
    vols = np.array([volume_ml(m) for m in masks], dtype=np.float64)
    if vols.size == 0:
        raise ValueError("cohort is empty")
    return float(vols.mean()), float(vols.std())


def bullseye_diff(pred: BullseyeTable, gt: BullseyeTable) -> BullseyeTable:
    return BullseyeTable({s: pred[s] - gt[s] for s in SEGMENTS}, pred.outside - gt.outside)


def bullseye_mean(tables) -> BullseyeTable:
    tables = list(tables)
    if not tables:
        raise ValueError("no tables to average")
    n = len(tables)
    return BullseyeTable({s: math.fsum(t[s] for t in tables) / n for s in SEGMENTS},
                         math.fsum(t.outside for t in tables) / n)


# --------------------------------------------------------------------------- reporting

CASE_FIELDS = ("case_id", "dice", "precision", "sensitivity", "specificity", "volume_ml",
               "gt_volume_ml")


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    precision: float
    sensitivity: float
    specificity: float
    volume_ml: float
    gt_volume_ml: float
    counts: ConfusionCounts


def evaluate_case(case_id: str, pred: Mask3, gt: Mask3) -> CaseMetrics:
    c = confusion(pred, gt)
    return CaseMetrics(case_id, dice(c), precision(c), sensitivity(c), specificity(c),
                       volume_ml(pred), volume_ml(gt), c)


def write_case_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CASE_FIELDS)
        for r in rows:
            w.writerow([r.case_id] + [repr(float(getattr(r, f))) for f in CASE_FIELDS[1:]])


def cohort_summary(rows) -> dict:
    """Mean-over-cases metrics plus pooled-voxel variants."""
    rows = list(rows)
    if not rows:
        raise ValueError("no cases")
    out = {"n_cases": len(rows)}
    for f in ("dice", "precision", "sensitivity", "specificity"):
        vals = np.array([getattr(r, f) for r in rows])
        out[f] = {"mean": float(vals.mean()), "std": float(vals.std())}
    pooled = ConfusionCounts(*(sum(getattr(r.counts, k) for r in rows)
                               for k in ("tp", "fp", "fn", "tn")))
    out["pooled"] = {"dice": dice(pooled), "precision": precision(pooled),
                     "sensitivity": sensitivity(pooled), "specificity": specificity(pooled),
                     "counts": asdict(pooled)}
    pv = np.array([r.volume_ml for r in rows])
    gv = np.array([r.gt_volume_ml for r in rows])
    out["volume_ml"] = {"pred_mean": float(pv.mean()), "pred_std": float(pv.std()),
                        "gt_mean": float(gv.mean()), "gt_std": float(gv.std())}
    return out


def write_cohort_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
