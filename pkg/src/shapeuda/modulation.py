"""Hierarchical feature modulation.

Bridges two feature domains at two granularities: a global channel-statistics
restyling (adaptive instance normalization) and a local, class-aware token
mixing pass.  The local pass works on a finer token grid: features are
upsampled, unfolded into tokens, partitioned into pure semantic cores and
impure boundary tokens by the purity of the aligned label sub-patch, and each
group is modulated by its own rule before folding and pooling back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng
from .tensors import IGNORE, FeatureMap, LabelMap, ShapeError


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class LayerNormParams:
    """Per-channel affine applied after positionwise normalization."""

    scale: np.ndarray
    offset: np.ndarray
    eps: float = 1e-6

    @classmethod
    def identity(cls, channels: int) -> "LayerNormParams":
        return cls(np.ones(channels), np.zeros(channels))


@dataclass
class HfmConfig:
    """Knobs of the modulation pass.

    ``fixed_lambda`` pins the per-call mixing factor instead of drawing it
    uniformly from [0, 1]; used by the degenerate-identity checks.
    """

    purity_threshold: float = 1.0
    upsample_factor: int = 2
    pool_fraction: float = 0.1
    epsilon: float = 1e-5
    fixed_lambda: float | None = None


@dataclass(frozen=True)
class TokenGrid:
    """Row-major N x C token matrix cut from a feature map.

    ``patch_px`` is the edge length of the label sub-patch aligned to each
    token (label resolution divided by the token grid resolution).
    """

    tokens: np.ndarray
    grid_h: int
    grid_w: int
    patch_px: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ShapeError("token count does not match grid dims")


@dataclass(frozen=True)
class HfmOutputs:
    """The four modulated maps produced by one forward pass."""

    source_styled: FeatureMap
    source_cross: FeatureMap
    target_styled: FeatureMap
    target_cross: FeatureMap
    mix_lambda: float = 0.0


def channel_stats(f: FeatureMap) -> ChannelStats:
    """Mean and population std of each channel over all H*W positions."""
    v = f.values
    return ChannelStats(v.mean(axis=(1, 2)), v.std(axis=(1, 2)))


def adain(source: FeatureMap, target: FeatureMap, eps: float = 1e-5) -> FeatureMap:
    """Restyle ``source`` so its channel statistics match ``target``'s."""
    if source.channels != target.channels:
        raise ShapeError(
            f"channel mismatch: {source.channels} vs {target.channels}"
        )
    s = channel_stats(source)
    t = channel_stats(target)
    normed = (source.values - s.mean[:, None, None]) / (s.std + eps)[:, None, None]
    return FeatureMap(t.std[:, None, None] * normed + t.mean[:, None, None])


def upsample_bilinear(f: FeatureMap, factor: int) -> FeatureMap:
    """Bilinear upsample with half-pixel centers (align-corners false)."""
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    if factor == 1:
        return FeatureMap(f.values.copy())
    v = f.values
    out = _interp_axis(v, factor, axis=1)
    out = _interp_axis(out, factor, axis=2)
    return FeatureMap(out)


def _interp_axis(v: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = v.shape[axis]
    x = (np.arange(n * factor) + 0.5) / factor - 0.5
    x0 = np.floor(x).astype(np.int64)
    w = x - x0
    lo = np.clip(x0, 0, n - 1)
    hi = np.clip(x0 + 1, 0, n - 1)
    shape = [1, 1, 1]
    shape[axis] = n * factor
    w = w.reshape(shape)
    return np.take(v, lo, axis=axis) * (1.0 - w) + np.take(v, hi, axis=axis) * w


def upsample_nearest(f: FeatureMap, factor: int) -> FeatureMap:
    """Pixel-replication upsample; exactly inverted by mean pooling."""
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    c, h, w = f.values.shape
    v = np.broadcast_to(
        f.values[:, :, None, :, None], (c, h, factor, w, factor)
    ).reshape(c, h * factor, w * factor)
    return FeatureMap(v.copy())


def downsample_mean(f: FeatureMap, factor: int) -> FeatureMap:
    """Non-overlapping factor x factor mean pooling."""
    c, h, w = f.values.shape
    if h % factor or w % factor:
        raise ShapeError(f"({h}, {w}) not divisible by pooling factor {factor}")
    blocks = f.values.reshape(c, h // factor, factor, w // factor, factor)
    return FeatureMap(blocks.mean(axis=(2, 4)))


def unfold(f: FeatureMap, patch_px: int = 1) -> TokenGrid:
    """One token per spatial position, row-major."""
    c, h, w = f.values.shape
    return TokenGrid(f.values.reshape(c, h * w).T.copy(), h, w, patch_px)


def fold(t: TokenGrid) -> FeatureMap:
    """Inverse of unfold."""
    return FeatureMap(t.tokens.T.reshape(-1, t.grid_h, t.grid_w).copy())


def patch_purity(patch: np.ndarray, num_classes: int) -> float:
    """Fraction of the patch taken by its majority class.

    IGNORE pixels count in neither numerator nor denominator; a patch of
    only IGNORE pixels scores 0 (treated as impure).
    """
    flat = np.asarray(patch).ravel()
    valid = flat[flat != IGNORE]
    if valid.size == 0:
        return 0.0
    counts = np.bincount(valid, minlength=num_classes)
    return float(counts.max()) / float(valid.size)


def token_patch_stats(labels: LabelMap, grid_h: int, grid_w: int):
    """Purity and majority class of every token's aligned label sub-patch.

    Returns (purity, majority) as length-N arrays in row-major token order;
    majority is -1 for all-IGNORE patches.  Label dims must be divisible by
    the grid dims.
    """
    h, w = labels.height, labels.width
    if h % grid_h or w % grid_w:
        raise ShapeError(f"label dims ({h}, {w}) not tiled by ({grid_h}, {grid_w})")
    ph, pw = h // grid_h, w // grid_w
    k = labels.num_classes
    patches = (
        labels.values.reshape(grid_h, ph, grid_w, pw)
        .transpose(0, 2, 1, 3)
        .reshape(grid_h * grid_w, ph * pw)
    )
    counts = (patches[:, :, None] == np.arange(k)[None, None, :]).sum(axis=1)
    valid = counts.sum(axis=1)
    majority = np.argmax(counts, axis=1)
    purity = np.zeros(len(patches))
    nonzero = valid > 0
    purity[nonzero] = counts.max(axis=1)[nonzero] / valid[nonzero]
    majority = np.where(nonzero, majority, -1)
    return purity, majority


def partition_tokens(purities: np.ndarray, tau_p: float):
    """Split token indices into pure (purity >= tau_p) and impure."""
    purities = np.asarray(purities)
    idx = np.arange(len(purities))
    pure = purities >= tau_p
    return idx[pure], idx[~pure]


def exemplar_pool(pool: np.ndarray, pool_fraction: float) -> np.ndarray:
    """Most representative exemplars: the ceil(fraction * n) tokens nearest
    to the pool's class-mean vector (Euclidean)."""
    n = len(pool)
    keep = min(n, max(1, math.ceil(pool_fraction * n)))
    dist = np.linalg.norm(pool - pool.mean(axis=0), axis=1)
    order = np.argsort(dist, kind="stable")
    return pool[order[:keep]]


def modulate_pure(
    token: np.ndarray,
    class_id: int,
    target_pools: dict,
    lam: float,
    rng: SeededRng,
    pool_fraction: float = 0.1,
) -> np.ndarray:
    """Convex mix of a pure source token with a representative target token
    of the same class; passes through unchanged when the pool is empty."""
    pool = target_pools.get(class_id)
    if pool is None or len(pool) == 0:
        return token.copy()
    exemplars = exemplar_pool(pool, pool_fraction)
    j = rng.integers(0, len(exemplars))
    return (1.0 - lam) * token + lam * exemplars[j]


def modulate_impure(
    src_tokens: np.ndarray,
    tgt_tokens: np.ndarray | None,
    lam: float,
    eps: float = 1e-5,
) -> np.ndarray:
    """Restyle boundary tokens with statistics interpolated between the
    source and target boundary sets (channelwise, population std).

    With an empty target set the mixed statistics fall back to the source
    statistics and the operation is an identity up to the eps guard.
    """
    if len(src_tokens) == 0:
        return src_tokens.copy()
    mu_s = src_tokens.mean(axis=0)
    sigma_s = src_tokens.std(axis=0)
    if tgt_tokens is None or len(tgt_tokens) == 0:
        mu_mix, sigma_mix = mu_s, sigma_s
    else:
        mu_t = tgt_tokens.mean(axis=0)
        sigma_t = tgt_tokens.std(axis=0)
        mu_mix = (1.0 - lam) * mu_s + lam * mu_t
        sigma_mix = (1.0 - lam) * sigma_s + lam * sigma_t
    return sigma_mix * (src_tokens - mu_s) / (sigma_s + eps) + mu_mix


def layer_norm(f: FeatureMap, params: LayerNormParams) -> FeatureMap:
    """Normalize each position's channel vector, then apply scale/offset."""
    if len(params.scale) != f.channels or len(params.offset) != f.channels:
        raise ShapeError("layer-norm params do not match channel count")
    v = f.values
    mean = v.mean(axis=0, keepdims=True)
    var = v.var(axis=0, keepdims=True)
    normed = (v - mean) / np.sqrt(var + params.eps)
    return FeatureMap(
        params.scale[:, None, None] * normed + params.offset[:, None, None]
    )


def _class_pools(tokens: np.ndarray, pure_mask: np.ndarray, classes: np.ndarray):
    pools = {}
    for k in np.unique(classes[pure_mask]):
        if k < 0:
            continue
        pools[int(k)] = tokens[pure_mask & (classes == k)]
    return pools


@dataclass(frozen=True)
class _TokenView:
    """Unfolded tokens of one domain with their purity partition."""

    grid: TokenGrid
    purity: np.ndarray
    classes: np.ndarray
    pure: np.ndarray


def _token_view(feat: FeatureMap, labels: LabelMap, cfg: HfmConfig) -> _TokenView:
    k = cfg.upsample_factor
    up = upsample_nearest(feat, k)
    grid = unfold(up, labels.height // (feat.height * k))
    purity, classes = token_patch_stats(labels, grid.grid_h, grid.grid_w)
    return _TokenView(grid, purity, classes, purity >= cfg.purity_threshold)


def _cross_modulate(
    view: _TokenView,
    other: _TokenView,
    cfg: HfmConfig,
    lam: float,
    rng: SeededRng,
) -> FeatureMap:
    """Local token-mixing path of one direction.

    Upsampling is by pixel replication so the trailing mean pooling inverts
    it exactly; the finer grid only refines the purity partition.
    """
    pools = _class_pools(other.grid.tokens, other.pure, other.classes)
    out = view.grid.tokens.copy()
    pure, classes = view.pure, view.classes
    for cls in sorted(int(c) for c in np.unique(classes[pure]) if c >= 0):
        idx = np.nonzero(pure & (classes == cls))[0]
        pool = pools.get(cls)
        if pool is None or len(pool) == 0:
            continue
        exemplars = exemplar_pool(pool, cfg.pool_fraction)
        picks = rng.integers(0, len(exemplars), size=len(idx))
        out[idx] = (1.0 - lam) * out[idx] + lam * exemplars[picks]

    impure_idx = np.nonzero(~pure)[0]
    if len(impure_idx):
        tgt_impure = other.grid.tokens[~other.pure]
        out[impure_idx] = modulate_impure(
            out[impure_idx], tgt_impure if len(tgt_impure) else None, lam, cfg.epsilon
        )

    grid = view.grid
    folded = fold(TokenGrid(out, grid.grid_h, grid.grid_w, grid.patch_px))
    return downsample_mean(folded, cfg.upsample_factor)


def hfm_forward(
    source_feat: FeatureMap,
    source_labels: LabelMap,
    target_feat: FeatureMap,
    target_pseudo: LabelMap,
    cfg: HfmConfig,
    rng: SeededRng,
    ln_params: LayerNormParams | None = None,
) -> HfmOutputs:
    """Full dual-granularity pass, applied symmetrically to both domains.

    Target tokens are classified by the supplied pseudo-labels.  One mixing
    factor is drawn per call and shared by every mixing site.  All four
    outputs pass through the final layer normalization.
    """
    if ln_params is None:
        ln_params = LayerNormParams.identity(source_feat.channels)
    lam = cfg.fixed_lambda if cfg.fixed_lambda is not None else rng.uniform()

    source_styled = adain(source_feat, target_feat, cfg.epsilon)
    target_styled = adain(target_feat, source_feat, cfg.epsilon)
    source_view = _token_view(source_feat, source_labels, cfg)
    target_view = _token_view(target_feat, target_pseudo, cfg)
    source_cross = _cross_modulate(source_view, target_view, cfg, lam, rng)
    target_cross = _cross_modulate(target_view, source_view, cfg, lam, rng)
    return HfmOutputs(
        source_styled=layer_norm(source_styled, ln_params),
        source_cross=layer_norm(source_cross, ln_params),
        target_styled=layer_norm(target_styled, ln_params),
        target_cross=layer_norm(target_cross, ln_params),
        mix_lambda=float(lam),
    )
