import json
import math

import numpy as np
import pytest

from shapeuda import (
    AdaptSettings,
    DecoderParams,
    FeatureMap,
    GateConfig,
    HfmConfig,
    IGNORE,
    LabelMap,
    SapConfig,
    SeededRng,
    Sample,
    TrainConfig,
    adapt,
    decode,
    ema_update,
    evaluate,
    ramp_weight,
    seg_loss,
    sup_loss,
    teacher_ensemble,
    unsup_loss,
)
from shapeuda.losses import softmax
from shapeuda.synthdata import SynthConfig, in_memory_dataset
from shapeuda.tensors import ProbMap, argmax_map
from shapeuda.training import (
    FeatureSet,
    save_checkpoint,
    load_checkpoint,
    new_state,
    selection_percentile,
    train_supervised,
)


def tiny_dataset(seed=7, n=6):
    cfg = SynthConfig(
        seed=seed,
        num_classes=4,
        image_size=16,
        feature_size=4,
        channels=6,
        n_source=n,
        n_target=n,
        blob_res=4,
        blob_fraction=0.2,
    )
    return in_memory_dataset(cfg)


def tiny_settings(**train_overrides):
    train = dict(epochs=2, batch_size=3, ramp_epochs=4)
    train.update(train_overrides)
    return AdaptSettings(train=TrainConfig(**train), seed=5)


# ------------------------------------------------------------------- ema


def test_ema_momentum_zero_copies_student():
    t = DecoderParams(np.ones((2, 3)), np.ones(2))
    s = DecoderParams(np.full((2, 3), 4.0), np.full(2, 4.0))
    out = ema_update(t, s, 0.0)
    assert np.array_equal(out.weight, s.weight)


def test_ema_fixed_point():
    t = DecoderParams(np.full((2, 2), 2.0), np.zeros(2))
    out = ema_update(t, t.copy(), 0.9)
    assert np.array_equal(out.weight, t.weight)


def test_ema_arithmetic_and_contraction():
    t = DecoderParams(np.zeros((1, 1)), np.zeros(1))
    s = DecoderParams(np.ones((1, 1)), np.ones(1))
    out = ema_update(t, s, 0.9)
    assert out.weight[0, 0] == pytest.approx(0.1)
    # contraction: |t' - s| = m |t - s|
    assert abs(out.weight[0, 0] - 1.0) == pytest.approx(0.9 * abs(0.0 - 1.0))


# ------------------------------------------------------------------ ramp


def test_ramp_plateau_and_start():
    assert ramp_weight(10, 10, 1.0) == 1.0
    assert ramp_weight(25, 10, 0.5) == 0.5
    assert ramp_weight(0, 10, 1.0) == pytest.approx(math.exp(-5))
    assert ramp_weight(5, 10, 2.0) == pytest.approx(2.0 * math.exp(-1.25))


def test_ramp_monotone():
    values = [ramp_weight(t, 20, 1.0) for t in range(30)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_selection_percentile_ramps_between_bounds():
    gate = GateConfig(rho_0=0.1, rho_max=0.8)
    lo = selection_percentile(0, gate, 10)
    hi = selection_percentile(10, gate, 10)
    assert lo == pytest.approx(0.1 + 0.7 * math.exp(-5))
    assert hi == pytest.approx(0.8)


# --------------------------------------------------------------- teacher


def test_teacher_ensemble_uniform_params_tiebreak():
    f = FeatureMap(SeededRng(1).normal((3, 4, 4)))
    teacher = DecoderParams(np.zeros((4, 3)), np.zeros(4))
    ens, consensus = teacher_ensemble(FeatureSet(f, f, f), teacher)
    assert len(ens) == 3
    assert np.all(consensus.values == 0)


def test_teacher_ensemble_consensus_matches_brute_force():
    rng = SeededRng(2)
    feats = FeatureSet(
        FeatureMap(rng.normal((5, 6, 6))),
        FeatureMap(rng.normal((5, 6, 6))),
        FeatureMap(rng.normal((5, 6, 6))),
    )
    teacher = DecoderParams(rng.normal((3, 5)), rng.normal(3))
    ens, consensus = teacher_ensemble(feats, teacher)
    stacked = ens.stacked()
    for r in range(6):
        for c in range(6):
            mean = stacked[:, :, r, c].mean(axis=0)
            assert consensus.values[r, c] == int(np.argmax(mean))


# ---------------------------------------------------------------- losses


def test_sup_loss_identical_features_equals_single():
    rng = SeededRng(3)
    f = FeatureMap(rng.normal((4, 8, 8)))
    labels = LabelMap(rng.integers(0, 3, (8, 8)).astype(np.uint8), 3)
    params = DecoderParams(0.2 * rng.normal((3, 4)), np.zeros(3))
    cfg = TrainConfig()
    triple, dw3, db3 = sup_loss(FeatureSet(f, f, f), labels, params, cfg)
    single, dw1, db1 = sup_loss([f], labels, params, cfg)
    assert triple == pytest.approx(single, abs=1e-12)
    assert np.allclose(dw3, dw1)


def test_sup_loss_mean_of_three_oracle():
    rng = SeededRng(4)
    feats = [FeatureMap(rng.normal((4, 8, 8))) for _ in range(3)]
    labels = LabelMap(rng.integers(0, 3, (8, 8)).astype(np.uint8), 3)
    params = DecoderParams(0.3 * rng.normal((3, 4)), 0.1 * rng.normal(3))
    cfg = TrainConfig()
    got, _, _ = sup_loss(FeatureSet(*feats), labels, params, cfg)
    want = np.mean(
        [seg_loss(decode(f, params), labels, None)[0] for f in feats]
    )
    assert got == pytest.approx(want, abs=1e-9)


def test_sup_loss_perfect_decoder_near_zero():
    labels = LabelMap(SeededRng(5).integers(0, 3, (16, 16)).astype(np.uint8), 3)
    one_hot = np.zeros((3, 16, 16))
    rows, cols = np.indices((16, 16))
    one_hot[labels.values, rows, cols] = 1.0
    f = FeatureMap(one_hot)
    params = DecoderParams(50.0 * np.eye(3), np.zeros(3))
    cfg = TrainConfig()
    loss, _, _ = sup_loss([f], labels, params, cfg)
    assert loss < 0.02


def test_unsup_loss_gating_and_vacuous():
    rng = SeededRng(6)
    f = FeatureMap(rng.normal((4, 8, 8)))
    params = DecoderParams(rng.normal((3, 4)), np.zeros(3))
    cfg = TrainConfig()
    pruned = LabelMap(np.full((8, 8), IGNORE, dtype=np.uint8), 3)
    w = np.ones((8, 8))
    loss, dw, db = unsup_loss(f, pruned, w, params, cfg, selected=False)
    assert loss == 0.0 and not dw.any() and not db.any()
    loss, dw, _ = unsup_loss(f, pruned, w, params, cfg, selected=True)
    assert loss == pytest.approx(0.0, abs=1e-9)  # nothing left to supervise


def test_unsup_loss_matches_weighted_seg_loss():
    rng = SeededRng(7)
    f = FeatureMap(rng.normal((4, 8, 8)))
    params = DecoderParams(0.4 * rng.normal((3, 4)), np.zeros(3))
    cfg = TrainConfig()
    labels = LabelMap(rng.integers(0, 3, (8, 8)).astype(np.uint8), 3)
    w = rng.uniform((8, 8))
    got, _, _ = unsup_loss(f, labels, w, params, cfg)
    want, _ = seg_loss(decode(f, params), labels, w, cfg.focal_gamma, cfg.dice_smooth)
    assert got == pytest.approx(want, abs=1e-12)


# ------------------------------------------------------------- adaptation


def _trajectory(settings, data):
    source, target = data
    state, reports = adapt(source, target, settings)
    return state.student.weight.tobytes(), [r.sup_loss for r in reports]


def test_gamma_zero_reduces_to_supervised_updates():
    data = tiny_dataset()
    base_weights, base_losses = _trajectory(tiny_settings(gamma_max=0.0), data)
    for flags in (dict(use_hpe=False), dict(use_sap=False), dict(use_hpe=False, use_sap=False)):
        weights, losses = _trajectory(tiny_settings(gamma_max=0.0, **flags), data)
        assert weights == base_weights  # bitwise identical trajectory
        assert losses == base_losses


def test_disabled_gates_equal_permissive_thresholds():
    data = tiny_dataset()
    flags_off = tiny_settings(use_hpe=False, use_sap=False)
    permissive = tiny_settings()
    permissive.gate = GateConfig(rho_0=1.0, rho_max=1.0)
    permissive.sap = SapConfig(q=100.0)
    a, _ = _trajectory(flags_off, data)
    b, _ = _trajectory(permissive, data)
    assert a == b


def test_selection_rate_at_least_rho():
    data = tiny_dataset()
    settings = tiny_settings(epochs=3)
    _, reports = adapt(*data, settings)
    for r in reports:
        assert r.selection_rate >= min(r.rho, 1.0) - 1e-9


def test_adapt_deterministic():
    data = tiny_dataset()
    a_state, a_reports = adapt(*data, tiny_settings())
    b_state, b_reports = adapt(*data, tiny_settings())
    assert np.array_equal(a_state.student.weight, b_state.student.weight)
    assert [r.to_json_dict() for r in a_reports] == [r.to_json_dict() for r in b_reports]


def test_supervised_reference_runs_and_evaluates():
    source, target = tiny_dataset()
    state, reports = train_supervised(source, tiny_settings(epochs=3))
    assert len(reports) == 3
    assert reports[-1].sup_loss <= reports[0].sup_loss * 1.5
    report = evaluate(state.student, target, state.upsample)
    assert 0.0 <= report.mean_dsc <= 100.0


def test_checkpoint_roundtrip(tmp_path):
    source, target = tiny_dataset()
    state, _ = adapt(source, target, tiny_settings())
    manifest = save_checkpoint(tmp_path, state)
    student, teacher, loaded = load_checkpoint(tmp_path)
    assert loaded["epoch"] == state.epoch
    assert loaded["rng_state"] == state.rng.state()
    assert np.allclose(student.weight, state.student.weight, atol=1e-6)
    assert np.allclose(teacher.bias, state.teacher.bias, atol=1e-6)
    assert manifest["config_hash"] == loaded["config_hash"]


def test_epoch_report_serializes():
    data = tiny_dataset()
    _, reports = adapt(*data, tiny_settings(epochs=1))
    payload = json.dumps(reports[0].to_json_dict())
    parsed = json.loads(payload)
    assert parsed["epoch"] == 0
    assert set(parsed) >= {
        "sup_loss", "unsup_loss", "total_loss", "gamma", "rho",
        "selection_rate", "pruned_classes",
    }
