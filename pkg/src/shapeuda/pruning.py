"""Structural anomaly pruning.

Classes whose pixel count swings across the ensemble's differently modulated
views are treated as hallucinations: the instability of a class is the
coefficient of variation of its per-member pixel counts, a batch-level
percentile of the instabilities of significant classes sets the threshold,
and every pixel of a class above it is masked out of the pseudo-label map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensors import IGNORE, LabelMap


@dataclass
class SapConfig:
    q: float = 50.0          # instability percentile for the threshold
    min_count: int = 10      # mean pixels for a class to count as significant
    eps: float = 1e-12       # stabilizer in the coefficient of variation

    def __post_init__(self):
        if not (0.0 <= self.q <= 100.0):
            raise ValueError("q must be a percentile in [0, 100]")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")


@dataclass(frozen=True)
class ClassSignature:
    """Per-member pixel counts of one class and their instability."""

    class_id: int
    counts: np.ndarray
    mean: float
    instability: float


@dataclass
class InstabilityReport:
    signatures: dict           # class -> ClassSignature
    theta: float
    anomalous: set
    pruned: LabelMap
    pruned_path: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "per_class": {
                str(k): {
                    "count_vector": [int(c) for c in sig.counts],
                    "mean": sig.mean,
                    "instability": sig.instability,
                }
                for k, sig in sorted(self.signatures.items())
            },
            "theta": self.theta if math.isfinite(self.theta) else None,
            "anomalous": sorted(int(k) for k in self.anomalous),
            "pruned_path": self.pruned_path,
        }


def class_signature(hard_maps, k: int, eps: float = 1e-12) -> ClassSignature:
    """Pixel-count vector of class k across the hard ensemble maps.

    Instability is the unbiased sample std of the counts over their mean
    (eps-stabilized); all-zero counts give 0.
    """
    counts = np.array(
        [int(np.count_nonzero(m.values == k)) for m in hard_maps], dtype=np.int64
    )
    mean = float(counts.mean())
    std = float(counts.std(ddof=1)) if len(counts) > 1 else 0.0
    return ClassSignature(k, counts, mean, std / (mean + eps))


def signatures_from_counts(counts: np.ndarray, eps: float = 1e-12) -> dict:
    """Per-class signatures from an (N_ens, K) pixel-count matrix."""
    out = {}
    for k in range(1, counts.shape[1]):
        c = counts[:, k].astype(np.int64)
        mean = float(c.mean())
        std = float(c.std(ddof=1)) if len(c) > 1 else 0.0
        out[k] = ClassSignature(k, c, mean, std / (mean + eps))
    return out


def all_signatures(hard_maps, num_classes: int, eps: float = 1e-12) -> dict:
    """Signature of every foreground class, vectorized over the ensemble."""
    counts = np.stack(
        [
            np.bincount(m.values[m.values != IGNORE], minlength=num_classes)
            for m in hard_maps
        ]
    )
    return signatures_from_counts(counts, eps)


def anomaly_threshold(instabilities, q: float = 50.0) -> float:
    """q-th linear-interpolation percentile; +inf when nothing is significant
    (so nothing gets pruned)."""
    values = np.asarray(list(instabilities), dtype=np.float64)
    if values.size == 0:
        return math.inf
    return float(np.percentile(values, q, method="linear"))


def significant_instabilities(signatures: dict, min_count: int):
    """Instability values of classes whose mean count clears the floor."""
    return [
        sig.instability
        for _, sig in sorted(signatures.items())
        if sig.mean >= min_count
    ]


def anomalous_set(signatures: dict, theta: float, min_count: int = 10) -> set:
    """Classes strictly above the threshold; insignificant classes never
    qualify."""
    return {
        k
        for k, sig in signatures.items()
        if sig.mean >= min_count and sig.instability > theta
    }


def prune(m: LabelMap, anomalous) -> LabelMap:
    """Mask every pixel of an anomalous class with IGNORE (idempotent)."""
    if not anomalous:
        return LabelMap(m.values.copy(), m.num_classes)
    values = m.values.copy()
    values[np.isin(values, list(anomalous))] = IGNORE
    return LabelMap(values, m.num_classes)


def batch_instability_reports(
    hard_maps_per_sample,
    consensus_maps,
    cfg: SapConfig,
) -> list:
    """Prune a batch: per-sample signatures, one batch-pooled threshold.

    The percentile pools the instabilities of significant classes across all
    samples of the batch, in sample order.
    """
    signatures = [
        all_signatures(maps, consensus.num_classes, cfg.eps)
        for maps, consensus in zip(hard_maps_per_sample, consensus_maps)
    ]
    pooled = []
    for sigs in signatures:
        pooled.extend(significant_instabilities(sigs, cfg.min_count))
    theta = anomaly_threshold(pooled, cfg.q)
    reports = []
    for sigs, consensus in zip(signatures, consensus_maps):
        anomalous = anomalous_set(sigs, theta, cfg.min_count)
        reports.append(
            InstabilityReport(
                signatures=sigs,
                theta=theta,
                anomalous=anomalous,
                pruned=prune(consensus, anomalous),
            )
        )
    return reports
