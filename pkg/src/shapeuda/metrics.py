"""Evaluation metrics: Dice score and average surface distance.

Boundaries are class pixels with at least one 4-neighbor outside the class
or lying on the image border; ASD is the symmetric mean nearest-boundary
Euclidean distance, scaled by the pixel spacing.  Both metrics exclude
pixels whose ground-truth value is IGNORE.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .tensors import IGNORE, LabelMap, ShapeError


@dataclass
class MetricReport:
    per_class_dsc: dict = field(default_factory=dict)   # percent
    per_class_asd: dict = field(default_factory=dict)   # pixels * spacing
    mean_dsc: float = 0.0
    mean_asd: float = 0.0

    def to_json_dict(self) -> dict:
        def enc(x):
            return None if not math.isfinite(x) else x

        return {
            "per_class_dsc": {str(k): v for k, v in sorted(self.per_class_dsc.items())},
            "per_class_asd": {str(k): enc(v) for k, v in sorted(self.per_class_asd.items())},
            "mean_dsc": self.mean_dsc,
            "mean_asd": enc(self.mean_asd),
        }


def _class_masks(pred: LabelMap, gt: LabelMap, k: int):
    if pred.values.shape != gt.values.shape:
        raise ShapeError("prediction and ground truth shapes differ")
    keep = gt.values != IGNORE
    return (pred.values == k) & keep, (gt.values == k) & keep


def dice_score(pred: LabelMap, gt: LabelMap, k: int) -> float:
    """Overlap 200*|P&G| / (|P|+|G|) in percent.

    Both masks empty counts as perfect (100); exactly one empty scores 0.
    """
    p, g = _class_masks(pred, gt, k)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 100.0
    return 200.0 * float(np.count_nonzero(p & g)) / float(np_ + ng)


def boundary_coords(mask: np.ndarray) -> np.ndarray:
    """(n, 2) coordinates of mask pixels exposed to the outside or border."""
    padded = np.pad(mask, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def asd(pred: LabelMap, gt: LabelMap, k: int, spacing: float = 1.0) -> float:
    """Symmetric average surface distance between class boundaries.

    Returns +inf (a sentinel the aggregators exclude) when either boundary
    is empty.
    """
    p, g = _class_masks(pred, gt, k)
    bp = boundary_coords(p)
    bg = boundary_coords(g)
    if len(bp) == 0 or len(bg) == 0:
        return math.inf
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return float(np.concatenate([d_pg, d_gp]).mean() * spacing)


def metric_report(pred: LabelMap, gt: LabelMap, spacing: float = 1.0) -> MetricReport:
    """Per-foreground-class DSC/ASD plus foreground averages.

    Classes with an undefined (infinite) ASD are reported as such but left
    out of the mean, with a warning.
    """
    report = MetricReport()
    asd_values = []
    for k in range(1, gt.num_classes):
        report.per_class_dsc[k] = dice_score(pred, gt, k)
        d = asd(pred, gt, k, spacing)
        report.per_class_asd[k] = d
        if math.isfinite(d):
            asd_values.append(d)
        else:
            warnings.warn(f"class {k}: empty boundary, ASD excluded from mean")
    dsc_values = list(report.per_class_dsc.values())
    report.mean_dsc = float(np.mean(dsc_values)) if dsc_values else 0.0
    report.mean_asd = float(np.mean(asd_values)) if asd_values else math.inf
    return report
