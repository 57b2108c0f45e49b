"""Desk-scale self-training harness.

One adaptation epoch: modulate features both ways, train the student on the
original + modulated source features against ground truth, build a teacher
ensemble from the original + modulated target features, gate the resulting
pseudo-labels by hypergraph plausibility, prune unstable classes, and apply
the surviving pseudo-labels as weighted supervision.  The teacher tracks the
student by exponential moving average; the unsupervised weight and the
selection percentile follow a sigmoid ramp.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import (
    DecoderParams,
    decode,
    decode_batch,
    param_grads,
    param_grads_batch,
    seg_loss,
    seg_loss_grid,
)
from .metrics import MetricReport, asd, dice_score
from .modulation import HfmConfig, LayerNormParams, hfm_forward, layer_norm
from .plausibility import (
    GateConfig,
    ScoreAccumulator,
    batch_stats,
    build_hypergraph,
    final_score,
    intra_score,
    inter_score,
    pixel_weight_grid_batch,
    sample_descriptors,
    select_samples,
)
from .pruning import (
    SapConfig,
    anomalous_set,
    anomaly_threshold,
    prune,
    significant_instabilities,
    signatures_from_counts,
)
from .rng import SeededRng
from .tensors import (
    IGNORE,
    FeatureMap,
    LabelMap,
    PredictionEnsemble,
    ProbMap,
    ShapeError,
    argmax_map,
    read_array,
    write_array,
)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    ema_momentum: float = 0.9
    gamma_max: float = 1.0       # plateau of the unsupervised weight ramp
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    ramp_epochs: int = 30
    batch_size: int = 8
    use_hfm: bool = True
    use_hpe: bool = True         # plausibility gating (select-all when off)
    use_sap: bool = True
    warmup_scores: int = 10
    score_capacity: int = 8192


@dataclass(frozen=True)
class Sample:
    """One dataset record: a feature map and its (possibly eval-only) labels."""

    feature: FeatureMap
    label: LabelMap


@dataclass(frozen=True)
class FeatureSet:
    """Original plus globally-styled plus locally-mixed variants of one map."""

    original: FeatureMap
    styled: FeatureMap
    cross: FeatureMap

    def __iter__(self):
        return iter((self.original, self.styled, self.cross))

    def __len__(self) -> int:
        return 3


@dataclass
class AdaptSettings:
    hfm: HfmConfig = field(default_factory=HfmConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    sap: SapConfig = field(default_factory=SapConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 7


@dataclass
class EpochReport:
    epoch: int
    sup_loss: float
    unsup_loss: float
    total_loss: float
    gamma: float
    rho: float
    selection_rate: float
    pruned_classes: int

    def to_json_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptState:
    student: DecoderParams
    teacher: DecoderParams
    accumulator: ScoreAccumulator
    rng: SeededRng
    settings: AdaptSettings
    epoch: int = 0
    upsample: int = 1


def ema_update(teacher: DecoderParams, student: DecoderParams, momentum: float) -> DecoderParams:
    """teacher' = m * teacher + (1 - m) * student, elementwise."""
    if not (0.0 <= momentum < 1.0):
        raise ValueError("momentum must be in [0, 1)")
    return DecoderParams(
        momentum * teacher.weight + (1.0 - momentum) * student.weight,
        momentum * teacher.bias + (1.0 - momentum) * student.bias,
    )


def ramp_weight(epoch: int, ramp_epochs: int, w_max: float) -> float:
    """Sigmoid-shaped ramp w_max * exp(-5 (1 - t/T)^2), plateauing at T."""
    if ramp_epochs < 1:
        raise ValueError("ramp length must be >= 1")
    t = min(epoch, ramp_epochs) / ramp_epochs
    return w_max * math.exp(-5.0 * (1.0 - t) ** 2)


def selection_percentile(epoch: int, gate: GateConfig, ramp_epochs: int) -> float:
    """rho ramps from rho_0 toward rho_max on the same sigmoid schedule."""
    return gate.rho_0 + (gate.rho_max - gate.rho_0) * ramp_weight(epoch, ramp_epochs, 1.0)


def teacher_ensemble(features, teacher: DecoderParams, upsample: int = 1):
    """Frozen-teacher predictions for each feature variant plus the
    consensus mask (argmax of the member mean)."""
    members = [decode(f, teacher, upsample) for f in features]
    if len(members) == 1:
        members = members * 3
    ens = PredictionEnsemble(tuple(members))
    return ens, argmax_map(ens.mean())


def sup_loss(features, labels: LabelMap, params: DecoderParams, cfg: TrainConfig, upsample: int = 1):
    """Mean segmentation loss over the feature variants; returns
    (loss, dW, db)."""
    total = 0.0
    dw = np.zeros_like(params.weight)
    db = np.zeros_like(params.bias)
    feats = list(features)
    for f in feats:
        p = decode(f, params, upsample)
        loss, grad_logits = seg_loss(p, labels, None, cfg.focal_gamma, cfg.dice_smooth)
        gw, gb = param_grads(f, grad_logits, upsample)
        total += loss
        dw += gw
        db += gb
    n = len(feats)
    return total / n, dw / n, db / n


def unsup_loss(
    feature: FeatureMap,
    pruned: LabelMap,
    weights: np.ndarray,
    params: DecoderParams,
    cfg: TrainConfig,
    upsample: int = 1,
    selected: bool = True,
):
    """Weighted segmentation loss on the pruned pseudo-labels of the original
    target feature; unselected samples contribute exactly zero."""
    if not selected:
        return 0.0, np.zeros_like(params.weight), np.zeros_like(params.bias)
    p = decode(feature, params, upsample)
    loss, grad_logits = seg_loss(p, pruned, weights, cfg.focal_gamma, cfg.dice_smooth)
    dw, db = param_grads(feature, grad_logits, upsample)
    return loss, dw, db


def new_state(settings: AdaptSettings, num_classes: int, channels: int, upsample: int) -> AdaptState:
    rng = SeededRng(settings.seed)
    student = DecoderParams.init(num_classes, channels, rng.spawn(0))
    return AdaptState(
        student=student,
        teacher=student.copy(),
        accumulator=ScoreAccumulator(settings.train.score_capacity),
        rng=rng,
        settings=settings,
        upsample=upsample,
    )


def normalized(f: FeatureMap) -> FeatureMap:
    """Features as the decoder consumes them: final layer normalization.

    Modulated maps leave hfm_forward already normalized; raw (original)
    feature maps pass through here so every decoder input lives in the same
    post-normalization space.
    """
    return layer_norm(f, LayerNormParams.identity(f.channels))


def _feature_sets(pair, state: AdaptState, pseudo: LabelMap | None):
    """Decoder-ready variants for one (source, target) pair.

    Modulation sees raw features; the originals are layer-normalized here to
    match the modulated maps.
    """
    src, tgt = pair
    cfg = state.settings
    norm_src = normalized(src.feature)
    norm_tgt = normalized(tgt.feature)
    if not cfg.train.use_hfm:
        return [norm_src], [norm_tgt]
    outs = hfm_forward(
        src.feature, src.label, tgt.feature, pseudo, cfg.hfm, state.rng
    )
    return (
        FeatureSet(norm_src, outs.source_styled, outs.source_cross),
        FeatureSet(norm_tgt, outs.target_styled, outs.target_cross),
    )


def _replicate_batch(grids: np.ndarray, factor: int) -> np.ndarray:
    """Pixel-replication of (B, h, w) grids to (B, h*factor, w*factor)."""
    if factor == 1:
        return grids
    b, h, w = grids.shape
    return (
        np.broadcast_to(grids[:, :, None, :, None], (b, h, factor, w, factor))
        .reshape(b, h * factor, w * factor)
        .copy()
    )


def _batch_step(pairs, state: AdaptState, gamma: float, rho: float):
    """One gradient step; returns (sup loss, unsup loss, n selected, n pruned).

    The decoder replicates grid logits onto the label lattice, so all dense
    work stays at feature resolution: losses consume per-block label
    statistics (seg_loss_grid) and teacher maps replicate exactly.
    """
    cfg = state.settings
    train = cfg.train
    n_pairs = len(pairs)
    up = state.upsample

    # teacher pseudo-labels classify target tokens during modulation
    if train.use_hfm:
        tgt_probs = decode_batch(
            [normalized(t.feature) for _, t in pairs], state.teacher
        )
        pseudo_arr = _replicate_batch(
            np.argmax(tgt_probs, axis=1).astype(np.uint8), up
        )
        pseudos = [LabelMap(v, tgt_probs.shape[1]) for v in pseudo_arr]
    else:
        pseudos = [None] * n_pairs

    src_sets, tgt_sets = [], []
    for pair, pseudo in zip(pairs, pseudos):
        src_set, tgt_set = _feature_sets(pair, state, pseudo)
        src_sets.append(src_set)
        tgt_sets.append(tgt_set)

    # student pass over all source variants at once
    n_feats = len(src_sets[0])
    flat_feats = [f for fs in src_sets for f in fs]
    flat_labels = np.stack(
        [pair[0].label.values for pair in pairs for _ in range(n_feats)]
    )
    probs = decode_batch(flat_feats, state.student)
    losses, grads = seg_loss_grid(
        probs, flat_labels, None, up, train.focal_gamma, train.dice_smooth
    )
    scale = 1.0 / (n_feats * n_pairs)
    sup_batch = float(losses.sum()) * scale
    dw, db = param_grads_batch(flat_feats, grads)
    dw *= scale
    db *= scale

    # frozen-teacher ensembles over all target variants (grid resolution;
    # block-constant probabilities replicate exactly onto the label lattice)
    flat_tgt = [f for fs in tgt_sets for f in fs]
    member_probs = decode_batch(flat_tgt, state.teacher)
    k = member_probs.shape[1]
    n_members = len(tgt_sets[0])
    stacked = member_probs.reshape((n_pairs, n_members) + member_probs.shape[1:])
    if n_members == 1:
        stacked = np.broadcast_to(stacked, (n_pairs, 3) + stacked.shape[2:])
    mean_probs = stacked.mean(axis=1)
    consensus_grid = np.argmax(mean_probs, axis=1).astype(np.uint8)
    consensus_arr = _replicate_batch(consensus_grid, up)
    consensuses = [LabelMap(v, k) for v in consensus_arr]
    weight_grids = _replicate_batch(pixel_weight_grid_batch(stacked), up)

    # hypergraph plausibility gating over the batch
    if train.use_hpe:
        hypergraphs = [build_hypergraph(m) for m in consensuses]
        descriptors = [sample_descriptors(g, cfg.gate.eps) for g in hypergraphs]
        stats = batch_stats(descriptors, cfg.gate.eps_stat)
        scores = []
        foreground = (consensus_arr > 0) & (consensus_arr != IGNORE)
        for i, (g, desc) in enumerate(zip(hypergraphs, descriptors)):
            fg = foreground[i]
            s_v = float(weight_grids[i][fg].mean()) if fg.any() else 0.0
            s_intra, _ = intra_score(g, stats, cfg.gate, desc)
            s_inter, _ = inter_score(g, stats, cfg.gate, desc)
            scores.append(final_score(s_v, s_intra, s_inter, cfg.gate.alpha))
        selected = set(
            int(i)
            for i in select_samples(state.accumulator, scores, rho, train.warmup_scores)
        )
    else:
        selected = set(range(n_pairs))

    # cross-view pruning of the consensus maps; label-lattice pixel counts
    # are the grid counts scaled by the exact replication area
    pruned_count = 0
    if train.use_sap:
        hard = np.argmax(stacked, axis=2)              # (B, N, h, w)
        area = up * up
        signatures = []
        for b in range(n_pairs):
            counts = area * np.stack(
                [
                    np.bincount(hard[b, n].ravel(), minlength=k)
                    for n in range(hard.shape[1])
                ]
            )
            signatures.append(signatures_from_counts(counts, cfg.sap.eps))
        pooled = []
        for sigs in signatures:
            pooled.extend(significant_instabilities(sigs, cfg.sap.min_count))
        theta = anomaly_threshold(pooled, cfg.sap.q)
        pruned_maps = []
        for sigs, consensus in zip(signatures, consensuses):
            anomalous = anomalous_set(sigs, theta, cfg.sap.min_count)
            pruned_count += len(anomalous)
            pruned_maps.append(prune(consensus, anomalous))
    else:
        pruned_maps = consensuses

    # weighted pseudo-label supervision on the selected samples
    unsup_batch = 0.0
    sel = sorted(selected)
    if sel:
        sel_feats = [list(tgt_sets[i])[0] for i in sel]  # normalized originals
        sel_labels = np.stack([pruned_maps[i].values for i in sel])
        sel_weights = np.stack([weight_grids[i] for i in sel])
        probs_u = decode_batch(sel_feats, state.student)
        losses_u, grads_u = seg_loss_grid(
            probs_u, sel_labels, sel_weights, up, train.focal_gamma, train.dice_smooth
        )
        udw, udb = param_grads_batch(sel_feats, grads_u)
        n_sel = len(sel)
        unsup_batch = float(losses_u.sum()) / n_sel
        udw /= n_sel
        udb /= n_sel
    else:
        udw = np.zeros_like(dw)
        udb = np.zeros_like(db)

    total = sup_batch + gamma * unsup_batch
    if not np.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss at epoch {state.epoch}: "
            f"sup={sup_batch} unsup={unsup_batch}"
        )
    state.student.weight -= train.lr * (dw + gamma * udw)
    state.student.bias -= train.lr * (db + gamma * udb)
    state.teacher = ema_update(state.teacher, state.student, train.ema_momentum)
    return sup_batch, unsup_batch, len(selected), pruned_count


def adapt_epoch(source_samples, target_samples, state: AdaptState) -> EpochReport:
    """One full epoch over both domains; mutates and returns via ``state``."""
    cfg = state.settings
    train = cfg.train
    rng = state.rng
    state.accumulator.start_epoch(state.epoch)
    gamma = ramp_weight(state.epoch, train.ramp_epochs, train.gamma_max)
    rho = selection_percentile(state.epoch, cfg.gate, train.ramp_epochs)

    n_s, n_t = len(source_samples), len(target_samples)
    perm_s = rng.permutation(n_s)
    perm_t = rng.permutation(n_t)
    n_steps = math.ceil(max(n_s, n_t) / train.batch_size)

    sup_total = unsup_total = 0.0
    selected_total = considered_total = 0
    pruned_total = 0

    for step in range(n_steps):
        lo = step * train.batch_size
        hi = min(lo + train.batch_size, max(n_s, n_t))
        pairs = [
            (
                source_samples[perm_s[i % n_s]],
                target_samples[perm_t[i % n_t]],
            )
            for i in range(lo, hi)
        ]
        sup_batch, unsup_batch, n_selected, n_pruned = _batch_step(
            pairs, state, gamma, rho
        )
        sup_total += sup_batch
        unsup_total += unsup_batch
        selected_total += n_selected
        considered_total += len(pairs)
        pruned_total += n_pruned

    report = EpochReport(
        epoch=state.epoch,
        sup_loss=sup_total / n_steps,
        unsup_loss=unsup_total / n_steps,
        total_loss=(sup_total + gamma * unsup_total) / n_steps,
        gamma=gamma,
        rho=rho,
        selection_rate=selected_total / considered_total,
        pruned_classes=pruned_total,
    )
    state.epoch += 1
    return report


def adapt(source_samples, target_samples, settings: AdaptSettings, log_fn=None):
    """Run the configured number of epochs; returns (state, reports)."""
    first = source_samples[0]
    upsample = first.label.height // first.feature.height
    if upsample * first.feature.height != first.label.height:
        raise ShapeError("label resolution must be an integer multiple of features")
    state = new_state(
        settings, first.label.num_classes, first.feature.channels, upsample
    )
    reports = []
    for _ in range(settings.train.epochs):
        report = adapt_epoch(source_samples, target_samples, state)
        reports.append(report)
        if log_fn is not None:
            log_fn(report)
    return state, reports


def train_supervised(source_samples, settings: AdaptSettings, log_fn=None):
    """Source-only training: the no-adaptation reference trajectory."""
    first = source_samples[0]
    upsample = first.label.height // first.feature.height
    state = new_state(
        settings, first.label.num_classes, first.feature.channels, upsample
    )
    train = settings.train
    rng = state.rng
    reports = []
    for epoch in range(train.epochs):
        perm = rng.permutation(len(source_samples))
        n_steps = math.ceil(len(source_samples) / train.batch_size)
        sup_total = 0.0
        for step in range(n_steps):
            batch = perm[step * train.batch_size:(step + 1) * train.batch_size]
            dw = np.zeros_like(state.student.weight)
            db = np.zeros_like(state.student.bias)
            loss_sum = 0.0
            for i in batch:
                s = source_samples[i]
                loss, gw, gb = sup_loss(
                    [normalized(s.feature)], s.label, state.student, train, upsample
                )
                loss_sum += loss
                dw += gw
                db += gb
            state.student.weight -= train.lr * dw / len(batch)
            state.student.bias -= train.lr * db / len(batch)
            state.teacher = ema_update(state.teacher, state.student, train.ema_momentum)
            sup_total += loss_sum / len(batch)
        report = EpochReport(
            epoch=epoch,
            sup_loss=sup_total / n_steps,
            unsup_loss=0.0,
            total_loss=sup_total / n_steps,
            gamma=0.0,
            rho=0.0,
            selection_rate=0.0,
            pruned_classes=0,
        )
        reports.append(report)
        if log_fn is not None:
            log_fn(report)
        state.epoch += 1
    return state, reports


def evaluate(params: DecoderParams, samples, upsample: int = 1, spacing: float = 1.0) -> MetricReport:
    """Decode every sample and aggregate per-class DSC/ASD against its labels.

    Features are layer-normalized exactly as during training.  A class
    enters a sample's tally only when present in that sample's ground truth;
    infinite ASD values are skipped.
    """
    num_classes = samples[0].label.num_classes
    dsc_values = {k: [] for k in range(1, num_classes)}
    asd_values = {k: [] for k in range(1, num_classes)}
    for s in samples:
        pred = argmax_map(decode(normalized(s.feature), params, upsample))
        present = set(np.unique(s.label.values)) - {0, 255}
        for k in present:
            k = int(k)
            dsc_values[k].append(dice_score(pred, s.label, k))
            d = asd(pred, s.label, k, spacing)
            if math.isfinite(d):
                asd_values[k].append(d)
    report = MetricReport()
    for k in range(1, num_classes):
        if dsc_values[k]:
            report.per_class_dsc[k] = float(np.mean(dsc_values[k]))
        if asd_values[k]:
            report.per_class_asd[k] = float(np.mean(asd_values[k]))
    dsc = list(report.per_class_dsc.values())
    asd_list = list(report.per_class_asd.values())
    report.mean_dsc = float(np.mean(dsc)) if dsc else 0.0
    report.mean_asd = float(np.mean(asd_list)) if asd_list else math.inf
    return report


def config_hash(settings: AdaptSettings) -> str:
    """Stable digest of the full settings bundle."""
    blob = json.dumps(asdict(settings), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(out_dir, state: AdaptState) -> dict:
    """Persist decoder tensors (SHT1) plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "student_weight.sht", state.student.weight.astype(np.float32))
    write_array(out / "student_bias.sht", state.student.bias.astype(np.float32))
    write_array(out / "teacher_weight.sht", state.teacher.weight.astype(np.float32))
    write_array(out / "teacher_bias.sht", state.teacher.bias.astype(np.float32))
    manifest = {
        "epoch": state.epoch,
        "upsample": state.upsample,
        "config_hash": config_hash(state.settings),
        "rng_state": state.rng.state(),
    }
    (out / "checkpoint.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_checkpoint(out_dir):
    """Load decoder params and the manifest written by save_checkpoint."""
    out = Path(out_dir)
    student = DecoderParams(
        read_array(out / "student_weight.sht").astype(np.float64),
        read_array(out / "student_bias.sht").astype(np.float64),
    )
    teacher = DecoderParams(
        read_array(out / "teacher_weight.sht").astype(np.float64),
        read_array(out / "teacher_bias.sht").astype(np.float64),
    )
    manifest = json.loads((out / "checkpoint.json").read_text())
    return student, teacher, manifest
