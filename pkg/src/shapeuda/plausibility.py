"""Hypergraph plausibility scoring for predicted segmentation masks.

A predicted mask is viewed as a hypergraph: foreground pixels are vertices,
each foreground class contributes one hyperedge (its pixel set), and a single
layout hyperedge collects the class centroids.  Vertex reliability comes from
ensemble certainty/consistency, intra-class shape from the isoperimetric
ratio, inter-class layout from centroid direction cosines; shape and layout
are z-scored against batch statistics and aggregated with an outlier-heavy
softmax weighting.  The fused score gates sample selection via a dynamic
top-percentile threshold over scores seen this epoch.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .tensors import IGNORE, LabelMap, PredictionEnsemble, ShapeError, argmax_map


@dataclass
class GateConfig:
    alpha: float = 0.25        # fusion weight of intra vs inter structure
    tau: float = 0.1           # softmax temperature of the outlier penalty
    rho_0: float = 0.1         # initial selection percentile
    rho_max: float = 0.8
    eps: float = 1e-6
    eps_stat: float = 1e-3     # floor for batch std values

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if not (0.0 < self.rho_0 <= self.rho_max <= 1.0):
            raise ValueError("need 0 < rho_0 <= rho_max <= 1")


@dataclass(frozen=True)
class StructuralHypergraph:
    """Vertices, per-class hyperedges, and the centroid layout hyperedge."""

    shape: tuple
    num_classes: int
    vertices: np.ndarray                 # (N, 2) row/col coordinates
    class_edges: dict                    # class -> (n_k, 2) coordinates
    centroids: dict                      # class -> (x, y), present classes only

    @property
    def present_classes(self) -> list:
        return sorted(self.class_edges)

    def class_mask(self, k: int) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        coords = self.class_edges[k]
        mask[coords[:, 0], coords[:, 1]] = True
        return mask


@dataclass(frozen=True)
class ShapeDescriptors:
    """Per-sample shape and layout descriptor values."""

    phi: dict        # class -> isoperimetric ratio
    psi: dict        # ordered (i, j) pair -> direction cosine


@dataclass(frozen=True)
class BatchShapeStats:
    """Mean/std of descriptors over the samples of one batch.

    Entries exist only for classes/pairs present in at least one sample;
    stds are population stds floored at eps_stat.
    """

    phi: dict        # class -> (mean, std, count)
    psi: dict        # pair -> (mean, std, count)


@dataclass
class PlausibilityReport:
    s_vertex: float
    s_intra: float
    s_inter: float
    s_final: float
    per_class: dict
    per_pair: dict
    pixel_weights: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "s_vertex": self.s_vertex,
            "s_intra": self.s_intra,
            "s_inter": self.s_inter,
            "s_final": self.s_final,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "per_pair": {f"{i},{j}": v for (i, j), v in self.per_pair.items()},
        }


class ScoreAccumulator:
    """Final scores observed so far in the current epoch (bounded buffer)."""

    def __init__(self, capacity: int = 8192, epoch: int = 0):
        self.epoch = epoch
        self._buffer = deque(maxlen=capacity)

    def start_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        self._buffer.clear()

    def extend(self, scores) -> None:
        self._buffer.extend(float(s) for s in scores)

    def __len__(self) -> int:
        return len(self._buffer)

    def values(self) -> np.ndarray:
        return np.fromiter(self._buffer, dtype=np.float64, count=len(self._buffer))


def build_hypergraph(m: LabelMap) -> StructuralHypergraph:
    """Vertices are all foreground pixels; hyperedge k holds class k's pixels."""
    v = m.values
    foreground = (v > 0) & (v != IGNORE)
    vertices = np.argwhere(foreground)
    class_edges = {}
    centroids = {}
    for k in range(1, m.num_classes):
        coords = np.argwhere(v == k)
        if len(coords):
            class_edges[k] = coords
            centroids[k] = centroid(coords)
    return StructuralHypergraph(
        shape=v.shape,
        num_classes=m.num_classes,
        vertices=vertices,
        class_edges=class_edges,
        centroids=centroids,
    )


def _entropy(p: np.ndarray, axis=0) -> np.ndarray:
    """Natural-log entropy with the 0 * log 0 = 0 convention."""
    return -xlogy(p, p).sum(axis=axis)


def pixel_certainty(p_bar: np.ndarray) -> float:
    """1 - H(mean prediction) / log K for a single pixel."""
    p_bar = np.asarray(p_bar, dtype=np.float64)
    return float(1.0 - _entropy(p_bar) / math.log(len(p_bar)))


def pixel_consistency(members: np.ndarray) -> float:
    """1 - JSD / log K for a single pixel, clamped to [0, 1].

    JSD here is the generalized Jensen-Shannon divergence across the ensemble
    members: entropy of the mean minus mean of entropies.
    """
    members = np.asarray(members, dtype=np.float64)
    n, k = members.shape
    jsd = _entropy(members.mean(axis=0)) - _entropy(members, axis=1).mean()
    return float(np.clip(1.0 - jsd / math.log(k), 0.0, 1.0))


def pixel_weight_grid(ens: PredictionEnsemble) -> np.ndarray:
    """Certainty * consistency for every pixel, as an H x W grid."""
    return pixel_weight_grid_batch(ens.stacked()[None])[0]


def pixel_weight_grid_batch(stacked: np.ndarray) -> np.ndarray:
    """Pixel weights for a (B, N, K, H, W) stack of ensembles."""
    k = stacked.shape[2]
    mean = stacked.mean(axis=1)
    h_mean = _entropy(mean, axis=1)                      # (B, H, W)
    h_members = _entropy(stacked, axis=2).mean(axis=1)
    certainty = 1.0 - h_mean / math.log(k)
    consistency = np.clip(1.0 - (h_mean - h_members) / math.log(k), 0.0, 1.0)
    return certainty * consistency


def vertex_score(ens: PredictionEnsemble, m: LabelMap):
    """Mean pixel weight over the foreground of the consensus mask.

    Returns (score, weights) where weights is the full H x W grid kept for
    loss weighting.  An empty foreground scores 0.
    """
    if ens.members[0].values.shape[1:] != m.values.shape:
        raise ShapeError("ensemble and mask spatial dims disagree")
    weights = pixel_weight_grid(ens)
    foreground = (m.values > 0) & (m.values != IGNORE)
    score = float(weights[foreground].mean()) if foreground.any() else 0.0
    return score, weights


def mask_perimeter(mask: np.ndarray) -> int:
    """Exposed-edge perimeter: 4-neighbor edges from a mask pixel to a
    non-mask pixel or the image border."""
    p = np.pad(mask.astype(bool), 1)
    core = p[1:-1, 1:-1]
    return int(
        (core & ~p[:-2, 1:-1]).sum()
        + (core & ~p[2:, 1:-1]).sum()
        + (core & ~p[1:-1, :-2]).sum()
        + (core & ~p[1:-1, 2:]).sum()
    )


def isoperimetric(mask: np.ndarray, eps: float = 1e-6) -> float:
    """Compactness 4*pi*Area / (Perimeter^2 + eps); 0 for an empty mask."""
    area = int(np.count_nonzero(mask))
    if area == 0:
        return 0.0
    per = mask_perimeter(mask)
    return float(4.0 * math.pi * area / (per * per + eps))


def centroid(coords: np.ndarray):
    """(x, y) arithmetic mean of (row, col) pixel coordinates."""
    if len(coords) == 0:
        raise ValueError("centroid of an empty pixel set is undefined")
    mean = np.asarray(coords, dtype=np.float64).mean(axis=0)
    return float(mean[1]), float(mean[0])


def direction_cosine(c_i, c_j, eps: float = 1e-6) -> float:
    """Horizontal direction cosine of the centroid offset c_j - c_i."""
    dx = c_j[0] - c_i[0]
    dy = c_j[1] - c_i[1]
    return float(dx / (math.hypot(dx, dy) + eps))


def sample_descriptors(g: StructuralHypergraph, eps: float = 1e-6) -> ShapeDescriptors:
    """Isoperimetric ratio per present class, direction cosine per ordered
    pair of distinct present classes."""
    phi = {k: isoperimetric(g.class_mask(k), eps) for k in g.present_classes}
    psi = {}
    for i in g.present_classes:
        for j in g.present_classes:
            if i != j:
                psi[(i, j)] = direction_cosine(g.centroids[i], g.centroids[j], eps)
    return ShapeDescriptors(phi=phi, psi=psi)


def _stats_over(values_by_key: dict, eps_stat: float) -> dict:
    out = {}
    for key, values in values_by_key.items():
        arr = np.asarray(values, dtype=np.float64)
        out[key] = (float(arr.mean()), max(float(arr.std()), eps_stat), len(arr))
    return out


def batch_stats(descriptors, eps_stat: float = 1e-3) -> BatchShapeStats:
    """Pool per-sample descriptors into per-class and per-pair batch stats."""
    phi_values: dict = {}
    psi_values: dict = {}
    for d in descriptors:
        for k, v in d.phi.items():
            phi_values.setdefault(k, []).append(v)
        for pair, v in d.psi.items():
            psi_values.setdefault(pair, []).append(v)
    return BatchShapeStats(
        phi=_stats_over(phi_values, eps_stat),
        psi=_stats_over(psi_values, eps_stat),
    )


def zscore_plausibility(value: float, mean: float, std: float, eps: float = 1e-6) -> float:
    """exp(-|z|) of the descriptor against its batch statistics."""
    z = (value - mean) / (std + eps)
    return math.exp(-abs(z))


def penalized_aggregate(scores, tau: float) -> float:
    """Softmax(-s/tau)-weighted sum: low outliers dominate as tau shrinks.

    An empty list aggregates to 1 (vacuous plausibility).
    """
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        return 1.0
    logits = -scores / tau
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    return float(np.dot(scores, weights))


def intra_score(
    g: StructuralHypergraph, stats: BatchShapeStats, cfg: GateConfig,
    descriptors: ShapeDescriptors | None = None,
):
    """Aggregate shape plausibility over the present classes."""
    if descriptors is None:
        descriptors = sample_descriptors(g, cfg.eps)
    per_class = {}
    scores = []
    for k in g.present_classes:
        mean, std, count = stats.phi[k]
        phi = descriptors.phi[k]
        z = (phi - mean) / (std + cfg.eps)
        s = math.exp(-abs(z))
        per_class[k] = {"phi": phi, "z": z, "score": s}
        scores.append(s)
    return penalized_aggregate(scores, cfg.tau), per_class


def inter_score(
    g: StructuralHypergraph, stats: BatchShapeStats, cfg: GateConfig,
    descriptors: ShapeDescriptors | None = None,
):
    """Aggregate layout plausibility over ordered pairs of present classes."""
    if descriptors is None:
        descriptors = sample_descriptors(g, cfg.eps)
    per_pair = {}
    scores = []
    for pair, psi in sorted(descriptors.psi.items()):
        mean, std, count = stats.psi[pair]
        z = (psi - mean) / (std + cfg.eps)
        s = math.exp(-abs(z))
        per_pair[pair] = {"psi": psi, "z": z, "score": s}
        scores.append(s)
    return penalized_aggregate(scores, cfg.tau), per_pair


def final_score(s_vertex: float, s_intra: float, s_inter: float, alpha: float) -> float:
    """Structural scores fused linearly, then gating the vertex score."""
    return s_vertex * (alpha * s_intra + (1.0 - alpha) * s_inter)


def plausibility_report(
    ens: PredictionEnsemble,
    m: LabelMap | None,
    stats: BatchShapeStats,
    cfg: GateConfig,
) -> PlausibilityReport:
    """Score one sample against the batch statistics."""
    if m is None:
        m = argmax_map(ens.mean())
    s_v, weights = vertex_score(ens, m)
    g = build_hypergraph(m)
    descriptors = sample_descriptors(g, cfg.eps)
    s_intra, per_class = intra_score(g, stats, cfg, descriptors)
    s_inter, per_pair = inter_score(g, stats, cfg, descriptors)
    return PlausibilityReport(
        s_vertex=s_v,
        s_intra=s_intra,
        s_inter=s_inter,
        s_final=final_score(s_v, s_intra, s_inter, cfg.alpha),
        per_class=per_class,
        per_pair=per_pair,
        pixel_weights=weights,
    )


def select_samples(
    acc: ScoreAccumulator,
    batch_scores,
    rho: float,
    warmup: int = 10,
) -> np.ndarray:
    """Indices whose score reaches the top-rho percentile of the epoch.

    The accumulator is updated with the batch first; the threshold is the
    (1 - rho) linear-interpolation quantile of everything accumulated, with
    a closed comparison.  While fewer than ``warmup`` scores have been seen,
    every sample is selected.
    """
    batch_scores = np.asarray(list(batch_scores), dtype=np.float64)
    acc.extend(batch_scores)
    if len(acc) < warmup:
        return np.arange(len(batch_scores))
    threshold = np.quantile(acc.values(), 1.0 - rho, method="linear")
    return np.nonzero(batch_scores >= threshold)[0]
