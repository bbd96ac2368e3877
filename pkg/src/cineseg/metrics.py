"""Segmentation evaluation metrics over hard masks.

Dice, precision and sensitivity are computed image-wide; specificity and
NPV restrict the count domain to the myocardium mask (myocardium acts as
the negative class). Ratio metrics with a zero denominator return ``None``
(undefined) instead of raising; the Dice of two empty masks is 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import t as t_dist

from .errors import DegenerateInputError, DimensionMismatchError
from .grid import LabelMap

__all__ = [
    "harden",
    "ConfusionCounts",
    "confusion_counts",
    "dice_score",
    "precision",
    "sensitivity",
    "specificity",
    "npv",
    "hausdorff_mm",
    "boundary_points",
    "pearson",
    "ClassMetrics",
    "evaluate_masks",
]


def harden(lbl: LabelMap) -> list[np.ndarray]:
    """Per-class boolean masks from the per-pixel argmax.

    Ties break toward the lowest class index; the masks partition the image.
    """
    classes = lbl.hard_classes()
    return [classes == k for k in range(lbl.class_count)]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def confusion_counts(pred: np.ndarray, gold: np.ndarray,
                     domain: np.ndarray | None = None) -> ConfusionCounts:
    """Pixel counts of pred vs gold inside ``domain`` (whole image if None)."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape:
        raise DimensionMismatchError(f"pred shape {pred.shape} != gold shape {gold.shape}")
    if domain is None:
        domain = np.ones_like(pred)
    else:
        domain = np.asarray(domain, dtype=bool)
        if domain.shape != pred.shape:
            raise DimensionMismatchError(f"domain shape {domain.shape} != mask shape {pred.shape}")
    p = pred[domain]
    g = gold[domain]
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


def dice_score(c: ConfusionCounts):
    """2TP/(2TP+FP+FN); two empty masks score a perfect 1."""
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        return 1.0
    return 2.0 * c.tp / den


def precision(c: ConfusionCounts):
    den = c.tp + c.fp
    return None if den == 0 else c.tp / den


def sensitivity(c: ConfusionCounts):
    den = c.tp + c.fn
    return None if den == 0 else c.tp / den


def specificity(c: ConfusionCounts):
    den = c.tn + c.fp
    return None if den == 0 else c.tn / den


def npv(c: ConfusionCounts):
    den = c.tn + c.fn
    return None if den == 0 else c.tn / den


# ---------------------------------------------------------------------------
# Hausdorff distance
# ---------------------------------------------------------------------------

def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a mask: in-mask pixels with a 4-neighbor outside
    (or on the image edge). Returns an ``(N, 2)`` array of (x, y).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    ys, xs = np.nonzero(mask & ~interior)
    return np.column_stack([xs, ys])


def hausdorff_mm(pred: np.ndarray, gold: np.ndarray,
                 spacing: tuple[float, float] = (1.0, 1.0)):
    """Symmetric Hausdorff distance between mask boundaries, in mm.

    The full (non-percentile) distance; per-axis pixel spacing scales the
    coordinates. Returns ``None`` when either mask is empty.
    """
    pa = boundary_points(pred)
    pb = boundary_points(gold)
    if len(pa) == 0 or len(pb) == 0:
        return None
    sx, sy = spacing
    a = pa * np.array([sx, sy])
    b = pb * np.array([sx, sy])
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    forward = d2.min(axis=1).max()
    backward = d2.min(axis=0).max()
    return float(np.sqrt(max(forward, backward)))


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

def pearson(x, y):
    """Sample Pearson r with a two-sided p-value from the t-distribution
    (n-2 dof). Returns ``(None, None)`` when either variance is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatchError("pearson needs two equal-length 1-D lists")
    n = len(x)
    if n < 3:
        raise DegenerateInputError(f"pearson needs at least 3 samples, got {n}")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = float(np.dot(xd, xd))
    sy = float(np.dot(yd, yd))
    if sx == 0.0 or sy == 0.0:
        return None, None
    r = float(np.dot(xd, yd) / np.sqrt(sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t_stat = r * np.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(t_dist.sf(abs(t_stat), n - 2))
    return r, p


# ---------------------------------------------------------------------------
# Per-class reports
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    """Metric record for one pathology class; None marks undefined values."""

    label: str
    dice: float | None
    precision: float | None
    sensitivity: float | None
    specificity: float | None
    npv: float | None
    hausdorff_mm: float | None

    def to_json(self) -> dict:
        return {
            "class": self.label,
            "dice": self.dice,
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "npv": self.npv,
            "hausdorff_mm": self.hausdorff_mm,
        }


def evaluate_masks(pred: np.ndarray, gold: np.ndarray, label: str,
                   myocardium: np.ndarray | None = None,
                   spacing: tuple[float, float] = (1.0, 1.0)) -> ClassMetrics:
    """All metrics for one class mask pair.

    ``myocardium`` restricts the specificity/NPV count domain; when absent
    they fall back to the whole image.
    """
    global_counts = confusion_counts(pred, gold)
    myo_counts = confusion_counts(pred, gold, myocardium) if myocardium is not None else global_counts
    return ClassMetrics(
        label=label,
        dice=dice_score(global_counts),
        precision=precision(global_counts),
        sensitivity=sensitivity(global_counts),
        specificity=specificity(myo_counts),
        npv=npv(myo_counts),
        hausdorff_mm=hausdorff_mm(pred, gold, spacing),
    )
