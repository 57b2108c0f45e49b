import numpy as np
import pytest

from shapeuda import (
    DecoderParams,
    FeatureMap,
    IGNORE,
    LabelMap,
    PredictionEnsemble,
    ProbMap,
    SeededRng,
    decode,
    seg_loss,
)
from shapeuda.losses import (
    decode_batch,
    one_hot_batch,
    param_grads,
    param_grads_batch,
    seg_loss_batch,
)
from shapeuda.plausibility import pixel_weight_grid, pixel_weight_grid_batch


def make_case(seed, b=5, k=4, c=6, h=5, w=7):
    rng = SeededRng(seed)
    feats = [FeatureMap(rng.normal((c, h, w))) for _ in range(b)]
    labels = rng.integers(0, k, (b, 2 * h, 2 * w)).astype(np.uint8)
    labels[rng.uniform((b, 2 * h, 2 * w)) < 0.1] = IGNORE
    weights = rng.uniform((b, 2 * h, 2 * w))
    params = DecoderParams(0.4 * rng.normal((k, c)), 0.1 * rng.normal(k))
    return feats, labels, weights, params


def test_decode_batch_matches_single():
    feats, _, _, params = make_case(1)
    batched = decode_batch(feats, params, upsample=2)
    for i, f in enumerate(feats):
        single = decode(f, params, upsample=2)
        assert np.array_equal(batched[i], single.values)


def test_seg_loss_batch_matches_single():
    feats, labels, weights, params = make_case(2)
    probs = decode_batch(feats, params, upsample=2)
    losses, grads = seg_loss_batch(probs, labels, weights)
    for i in range(len(feats)):
        p = ProbMap(probs[i], validate=False)
        y = LabelMap(labels[i], params.num_classes)
        loss, grad = seg_loss(p, y, weights[i])
        assert losses[i] == pytest.approx(loss, abs=1e-12)
        assert np.allclose(grads[i], grad, atol=1e-15)


def test_seg_loss_batch_unweighted_matches_single():
    feats, labels, _, params = make_case(3)
    probs = decode_batch(feats, params, upsample=2)
    losses, grads = seg_loss_batch(probs, labels, None)
    for i in range(len(feats)):
        p = ProbMap(probs[i], validate=False)
        y = LabelMap(labels[i], params.num_classes)
        loss, grad = seg_loss(p, y, None)
        assert losses[i] == pytest.approx(loss, abs=1e-12)
        assert np.allclose(grads[i], grad, atol=1e-15)


def test_param_grads_batch_matches_sum_of_singles():
    feats, labels, weights, params = make_case(4)
    probs = decode_batch(feats, params, upsample=2)
    _, grads = seg_loss_batch(probs, labels, weights)
    dw_b, db_b = param_grads_batch(feats, grads, upsample=2)
    dw_s = np.zeros_like(dw_b)
    db_s = np.zeros_like(db_b)
    for i, f in enumerate(feats):
        dw, db = param_grads(f, grads[i], upsample=2)
        dw_s += dw
        db_s += db
    assert np.allclose(dw_b, dw_s, atol=1e-12)
    assert np.allclose(db_b, db_s, atol=1e-12)


def test_one_hot_batch_shapes_and_ignore():
    labels = np.array([[[0, IGNORE], [2, 1]]], dtype=np.uint8)
    valid, one_hot = one_hot_batch(labels, 3)
    assert valid.sum() == 3
    assert one_hot[0, :, 0, 1].sum() == 0.0  # ignored pixel is all-zero
    assert one_hot[0, 2, 1, 0] == 1.0


def test_seg_loss_grid_matches_replicated_batch():
    from shapeuda.losses import replicate, seg_loss_grid

    feats, labels, weights, params = make_case(6, h=4, w=4)
    probs_lo = decode_batch(feats, params)
    probs_hi = np.stack([replicate(p, 2) for p in probs_lo])
    for w in (weights, None):
        losses_lo, grads_lo = seg_loss_grid(probs_lo, labels, w, block=2)
        losses_hi, grads_hi = seg_loss_batch(probs_hi, labels, w)
        assert np.allclose(losses_lo, losses_hi, rtol=1e-12)
        # grid gradient equals the block-summed full-resolution gradient
        b, k, h, wd = grads_hi.shape
        pooled = grads_hi.reshape(b, k, h // 2, 2, wd // 2, 2).sum(axis=(3, 5))
        assert np.allclose(grads_lo, pooled, atol=1e-12)


def test_pixel_weight_grid_batch_matches_single():
    rng = SeededRng(5)
    stacks = []
    for _ in range(3):
        members = []
        for _ in range(3):
            logits = rng.normal((4, 6, 6))
            e = np.exp(logits - logits.max(axis=0))
            members.append(ProbMap(e / e.sum(axis=0), validate=False))
        stacks.append(PredictionEnsemble(tuple(members)))
    batched = pixel_weight_grid_batch(np.stack([e.stacked() for e in stacks]))
    for i, ens in enumerate(stacks):
        assert np.allclose(batched[i], pixel_weight_grid(ens), atol=1e-15)
