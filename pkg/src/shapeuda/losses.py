"""Toy per-pixel linear decoder and segmentation losses with analytic
gradients.

The decoder is a 1x1-convolution equivalent: logits = W f + b per position,
optionally replicated by an integer factor so predictions live at label
resolution.  Both losses return their gradient with respect to the logits at
prediction resolution; ``param_grads`` chains that back to (W, b) through the
replication (block sum) and the linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensors import IGNORE, FeatureMap, LabelMap, ProbMap, ShapeError

_LOG_FLOOR = 1e-300


@dataclass
class DecoderParams:
    """Per-pixel linear classifier: weight (K, C), bias (K,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("decoder params must be W (K, C) and b (K,)")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def channels(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.weight.copy(), self.bias.copy())

    @classmethod
    def init(cls, num_classes: int, channels: int, rng, scale: float = 0.01):
        w = scale * rng.normal((num_classes, channels))
        return cls(w, np.zeros(num_classes))


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def replicate(grid: np.ndarray, factor: int) -> np.ndarray:
    """Pixel-replication upsample of a (K, H, W) grid."""
    if factor == 1:
        return grid
    k, h, w = grid.shape
    out = np.broadcast_to(
        grid[:, :, None, :, None], (k, h, factor, w, factor)
    )
    return out.reshape(k, h * factor, w * factor).copy()


def decode_logits(f: FeatureMap, params: DecoderParams, upsample: int = 1) -> np.ndarray:
    """Raw logits (K, H*u, W*u); replication realizes the decoder's upsampling."""
    if f.channels != params.channels:
        raise ShapeError(f"decoder expects C={params.channels}, got {f.channels}")
    logits = np.einsum("kc,chw->khw", params.weight, f.values) + params.bias[:, None, None]
    return replicate(logits, upsample)


def decode(f: FeatureMap, params: DecoderParams, upsample: int = 1) -> ProbMap:
    """Per-pixel softmax over the decoder logits.

    Softmax commutes with pixel replication, so it runs at feature
    resolution before the upsample.
    """
    if f.channels != params.channels:
        raise ShapeError(f"decoder expects C={params.channels}, got {f.channels}")
    logits = np.einsum("kc,chw->khw", params.weight, f.values) + params.bias[:, None, None]
    return ProbMap(replicate(softmax(logits), upsample), validate=False)


def block_sum(grid: np.ndarray, factor: int) -> np.ndarray:
    """Sum non-overlapping factor x factor blocks (adjoint of replication)."""
    if factor == 1:
        return grid
    k, h, w = grid.shape
    return grid.reshape(k, h // factor, factor, w // factor, factor).sum(axis=(2, 4))


def param_grads(f: FeatureMap, grad_logits: np.ndarray, upsample: int = 1):
    """Chain a logits gradient back to (dW, db)."""
    g = block_sum(grad_logits, upsample)
    dw = np.einsum("khw,chw->kc", g, f.values)
    db = g.sum(axis=(1, 2))
    return dw, db


def _valid_one_hot(p: ProbMap, y: LabelMap):
    if p.values.shape[1:] != y.values.shape:
        raise ShapeError("probabilities and labels disagree on (H, W)")
    valid = y.values != IGNORE
    labels = np.where(valid, y.values, 0)
    one_hot = np.zeros_like(p.values)
    rows, cols = np.nonzero(valid)
    one_hot[labels[valid], rows, cols] = 1.0
    return valid, one_hot


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Pull a probability gradient through the per-pixel softmax."""
    inner = (grad_p * p).sum(axis=0, keepdims=True)
    return p * (grad_p - inner)


def _weighted_valid(valid: np.ndarray, w: np.ndarray | None) -> np.ndarray:
    if w is None:
        return valid.astype(np.float64)
    return np.where(valid, np.asarray(w, dtype=np.float64), 0.0)


def _dice_parts(pv, valid, one_hot, wv, smooth):
    """Soft Dice over foreground classes: (loss, grad wrt probabilities)."""
    k = pv.shape[0]
    foreground = slice(1, k)
    inter = (wv * pv[foreground] * one_hot[foreground]).sum(axis=(1, 2))
    union = (wv * (pv[foreground] + one_hot[foreground])).sum(axis=(1, 2))
    dice = (2.0 * inter + smooth) / (union + smooth)
    n_fg = k - 1
    loss = 1.0 - dice.mean()

    grad_p = np.zeros_like(pv)
    # d(loss)/d(p_k) = -(1/n_fg) w (2 y_k (union+s) - (2 inter + s)) / (union+s)^2
    denom = (union + smooth) ** 2
    grad_p[foreground] = (
        -(1.0 / n_fg)
        * wv[None]
        * (2.0 * one_hot[foreground] * (union + smooth)[:, None, None]
           - (2.0 * inter + smooth)[:, None, None])
        / denom[:, None, None]
    )
    return float(loss), grad_p


def _focal_parts(pv, valid, one_hot, wv, focal_gamma):
    """Focal term -(1-p_t)^gamma log p_t: (loss, grad wrt probabilities)."""
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(pv)
    wn = wv / n_valid
    p_t = (pv * one_hot).sum(axis=0)                   # prob of the true class
    p_t_safe = np.maximum(p_t, _LOG_FLOOR)
    miss = 1.0 - p_t
    log_pt = np.log(p_t_safe)
    focal = np.where(valid, -(miss ** focal_gamma) * log_pt, 0.0)
    loss = float((wn * focal).sum())

    # d(focal)/d(p_t) = gamma (1-p_t)^(gamma-1) log p_t - (1-p_t)^gamma / p_t
    if focal_gamma == 0.0:
        dfocal = -1.0 / p_t_safe
    else:
        dfocal = (
            focal_gamma * miss ** (focal_gamma - 1.0) * log_pt
            - miss ** focal_gamma / p_t_safe
        )
    grad_p = one_hot * (wn * np.where(valid, dfocal, 0.0))[None]
    return loss, grad_p


def dice_loss(p: ProbMap, y: LabelMap, w: np.ndarray | None = None, smooth: float = 1.0):
    """Soft Dice loss over foreground classes.

    IGNORE pixels drop out of every sum; optional pixel weights scale both
    intersection and union terms.  Returns (loss, grad wrt logits); the loss
    lies in [0, 1] and classes absent from prediction and truth contribute a
    perfect overlap of 1.
    """
    valid, one_hot = _valid_one_hot(p, y)
    wv = _weighted_valid(valid, w)
    loss, grad_p = _dice_parts(p.values, valid, one_hot, wv, smooth)
    return loss, _softmax_backward(p.values, grad_p)


def focal_loss(
    p: ProbMap,
    y: LabelMap,
    w: np.ndarray | None = None,
    focal_gamma: float = 2.0,
):
    """Focal loss -(1 - p_t)^gamma log p_t averaged over valid pixels.

    Per-pixel weights, when given, scale each pixel's contribution; the
    normalizer stays the valid-pixel count.  Returns (loss, grad wrt logits).
    """
    valid, one_hot = _valid_one_hot(p, y)
    wv = _weighted_valid(valid, w)
    loss, grad_p = _focal_parts(p.values, valid, one_hot, wv, focal_gamma)
    return loss, _softmax_backward(p.values, grad_p)


def seg_loss(
    p: ProbMap,
    y: LabelMap,
    w: np.ndarray | None = None,
    focal_gamma: float = 2.0,
    dice_smooth: float = 1.0,
):
    """Dice + focal with unit weights; returns (loss, grad wrt logits)."""
    valid, one_hot = _valid_one_hot(p, y)
    wv = _weighted_valid(valid, w)
    d_loss, d_grad = _dice_parts(p.values, valid, one_hot, wv, dice_smooth)
    f_loss, f_grad = _focal_parts(p.values, valid, one_hot, wv, focal_gamma)
    return d_loss + f_loss, _softmax_backward(p.values, d_grad + f_grad)


# ----------------------------------------------------------------------
# Batched twins of the per-sample operations.  Same formulas with a
# leading batch axis; the training loop uses these for throughput while
# the per-sample functions above remain the reference surface.


def decode_batch(feats, params: DecoderParams, upsample: int = 1) -> np.ndarray:
    """Probabilities (B, K, H*u, W*u) for a sequence of feature maps."""
    x = np.stack([f.values for f in feats])
    logits = (
        np.einsum("kc,bchw->bkhw", params.weight, x)
        + params.bias[None, :, None, None]
    )
    probs = softmax(logits, axis=1)
    if upsample > 1:
        b, k, h, w = probs.shape
        probs = np.broadcast_to(
            probs[:, :, :, None, :, None], (b, k, h, upsample, w, upsample)
        ).reshape(b, k, h * upsample, w * upsample).copy()
    return probs


def one_hot_batch(labels: np.ndarray, num_classes: int):
    """(valid, one_hot) for a (B, H, W) uint8 label array."""
    valid = labels != IGNORE
    safe = np.where(valid, labels, 0)
    one_hot = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    b, rows, cols = np.nonzero(valid)
    one_hot[b, safe[valid], rows, cols] = 1.0
    return valid, one_hot


def seg_loss_batch(
    probs: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    focal_gamma: float = 2.0,
    dice_smooth: float = 1.0,
):
    """Per-sample Dice+focal losses and logits gradients, batched.

    probs: (B, K, H, W); labels: (B, H, W); weights: (B, H, W) or None.
    Returns (losses (B,), grads (B, K, H, W)).
    """
    b, k = probs.shape[:2]
    valid, one_hot = one_hot_batch(labels, k)
    if weights is None:
        wv = valid.astype(np.float64)
    else:
        wv = np.where(valid, weights, 0.0)

    # soft Dice over foreground classes, per sample
    fg = slice(1, k)
    inter = (wv[:, None] * probs[:, fg] * one_hot[:, fg]).sum(axis=(2, 3))
    union = (wv[:, None] * (probs[:, fg] + one_hot[:, fg])).sum(axis=(2, 3))
    dice = (2.0 * inter + dice_smooth) / (union + dice_smooth)
    dice_losses = 1.0 - dice.mean(axis=1)
    grad_p = np.zeros_like(probs)
    denom = (union + dice_smooth) ** 2
    grad_p[:, fg] = (
        -(1.0 / (k - 1))
        * wv[:, None]
        * (2.0 * one_hot[:, fg] * (union + dice_smooth)[..., None, None]
           - (2.0 * inter + dice_smooth)[..., None, None])
        / denom[..., None, None]
    )

    # focal, normalized by each sample's valid-pixel count
    n_valid = valid.sum(axis=(1, 2))
    norm = np.maximum(n_valid, 1)[:, None, None]
    wn = wv / norm
    p_t = (probs * one_hot).sum(axis=1)
    p_t_safe = np.maximum(p_t, _LOG_FLOOR)
    miss = 1.0 - p_t
    log_pt = np.log(p_t_safe)
    focal = np.where(valid, -(miss ** focal_gamma) * log_pt, 0.0)
    focal_losses = (wn * focal).sum(axis=(1, 2))
    if focal_gamma == 0.0:
        dfocal = -1.0 / p_t_safe
    else:
        dfocal = (
            focal_gamma * miss ** (focal_gamma - 1.0) * log_pt
            - miss ** focal_gamma / p_t_safe
        )
    grad_p += one_hot * (wn * np.where(valid, dfocal, 0.0))[:, None]

    inner = (grad_p * probs).sum(axis=1, keepdims=True)
    grads = probs * (grad_p - inner)
    return dice_losses + focal_losses, grads


def param_grads_batch(feats, grad_logits: np.ndarray, upsample: int = 1):
    """Summed (dW, db) over a batch of (feature, logits-gradient) pairs."""
    x = np.stack([f.values for f in feats])
    g = grad_logits
    if upsample > 1:
        b, k, h, w = g.shape
        g = g.reshape(b, k, h // upsample, upsample, w // upsample, upsample).sum(
            axis=(3, 5)
        )
    dw = np.einsum("bkhw,bchw->kc", g, x)
    db = g.sum(axis=(0, 2, 3))
    return dw, db


def _block_sum_hw(grid: np.ndarray, block: int) -> np.ndarray:
    """Sum block x block tiles over the two trailing axes."""
    if block == 1:
        return grid
    shape = grid.shape
    h, w = shape[-2] // block, shape[-1] // block
    return grid.reshape(shape[:-2] + (h, block, w, block)).sum(axis=(-3, -1))


def block_label_stats(
    labels: np.ndarray,
    num_classes: int,
    weights: np.ndarray | None,
    block: int,
):
    """Per-block sufficient statistics of (B, H, W) labels for grid losses.

    Returns (wy, w_tot, n_valid): weighted per-class indicator block sums
    (B, K, h, w), weighted valid-pixel block sums (B, h, w), and valid-pixel
    counts (B,).  IGNORE pixels carry zero weight.
    """
    valid = labels != IGNORE
    if weights is None:
        w = valid.astype(np.float64)
    else:
        w = np.where(valid, weights, 0.0)
    b = labels.shape[0]
    h, w_dim = labels.shape[1] // block, labels.shape[2] // block
    wy = np.empty((b, num_classes, h, w_dim))
    for k in range(num_classes):
        wy[:, k] = _block_sum_hw(w * (labels == k), block)
    return wy, _block_sum_hw(w, block), valid.sum(axis=(1, 2))


def seg_loss_grid(
    probs: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    block: int = 1,
    focal_gamma: float = 2.0,
    dice_smooth: float = 1.0,
):
    """Dice+focal against labels at ``block`` times the probability grid.

    Exploits the decoder's pixel replication: with probabilities constant on
    each block x block tile, every pixel sum collapses onto per-block label
    and weight aggregates, so losses and logit gradients come out at grid
    resolution.  Algebraically identical to ``seg_loss_batch`` on the
    replicated probabilities (up to float summation order).

    probs: (B, K, h, w); labels: (B, h*block, w*block).
    Returns (losses (B,), grads (B, K, h, w)).
    """
    b, k = probs.shape[:2]
    wy, w_tot, n_valid = block_label_stats(labels, k, weights, block)

    # soft Dice over foreground classes
    fg = slice(1, k)
    inter = (probs[:, fg] * wy[:, fg]).sum(axis=(2, 3))
    union = (probs[:, fg] * w_tot[:, None]).sum(axis=(2, 3)) + wy[:, fg].sum(
        axis=(2, 3)
    )
    dice = (2.0 * inter + dice_smooth) / (union + dice_smooth)
    dice_losses = 1.0 - dice.mean(axis=1)
    grad_p = np.zeros_like(probs)
    denom = (union + dice_smooth) ** 2
    grad_p[:, fg] = (
        -(1.0 / (k - 1))
        * (2.0 * wy[:, fg] * (union + dice_smooth)[..., None, None]
           - (2.0 * inter + dice_smooth)[..., None, None] * w_tot[:, None])
        / denom[..., None, None]
    )

    # focal, normalized by each sample's valid-pixel count
    wn = wy / np.maximum(n_valid, 1)[:, None, None, None]
    p_safe = np.maximum(probs, _LOG_FLOOR)
    miss = 1.0 - probs
    log_p = np.log(p_safe)
    focal_losses = (wn * (-(miss ** focal_gamma) * log_p)).sum(axis=(1, 2, 3))
    if focal_gamma == 0.0:
        dfocal = -1.0 / p_safe
    else:
        dfocal = (
            focal_gamma * miss ** (focal_gamma - 1.0) * log_p
            - miss ** focal_gamma / p_safe
        )
    grad_p += wn * dfocal

    inner = (grad_p * probs).sum(axis=1, keepdims=True)
    grads = probs * (grad_p - inner)
    return dice_losses + focal_losses, grads
