"""Deterministic synthetic two-domain dataset.

Each sample is an organic multi-class label map (thresholded smoothed noise,
later classes win overlaps) with a feature map at a coarser grid: every
feature pixel carries its block's majority-class prototype vector plus
Gaussian noise.  The target domain applies one dataset-level per-channel
affine transform (gain, offset) to the clean prototype signal before adding
independent noise, giving a controllable, invertible domain shift.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .modulation import upsample_bilinear
from .rng import SeededRng
from .tensors import FeatureMap, LabelMap, as_float32, write_tensor, read_tensor
from .training import Sample


@dataclass
class SynthConfig:
    seed: int = 7
    num_classes: int = 5           # background + 4 structures
    image_size: int = 64
    feature_size: int = 16
    channels: int = 16
    n_source: int = 200
    n_target: int = 200
    gain_range: tuple = (0.4, 1.8)     # per-channel multiplicative shift
    offset_range: tuple = (-1.2, 1.2)  # per-channel additive shift
    noise: float = 0.35
    blob_fraction: float = 0.12    # label-map area targeted per class
    blob_res: int = 8              # low-res grid of the smoothed noise field
    proto_scale: float = 2.0       # spread of the class prototype vectors

    def __post_init__(self):
        for name in ("image_size", "feature_size", "blob_res"):
            v = getattr(self, name)
            if v < 2 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.num_classes < 2:
            raise ValueError("need at least background + 1 class")
        if self.image_size % self.feature_size:
            raise ValueError("image_size must be a multiple of feature_size")


def domain_params(cfg: SynthConfig):
    """Dataset-level prototypes and the target domain's affine shift.

    Derived from the config seed alone so every sample of a dataset shares
    them.
    """
    rng = SeededRng(cfg.seed).spawn(0)
    protos = cfg.proto_scale * rng.normal((cfg.channels, cfg.num_classes))
    g_lo, g_hi = cfg.gain_range
    o_lo, o_hi = cfg.offset_range
    gain = g_lo + (g_hi - g_lo) * rng.uniform(cfg.channels)
    offset = o_lo + (o_hi - o_lo) * rng.uniform(cfg.channels)
    return protos, gain, offset


def _blob_field(cfg: SynthConfig, rng: SeededRng) -> np.ndarray:
    low = rng.normal((1, cfg.blob_res, cfg.blob_res))
    up = upsample_bilinear(FeatureMap(low), cfg.image_size // cfg.blob_res)
    return up.values[0]


def gen_label(cfg: SynthConfig, rng: SeededRng) -> LabelMap:
    """Threshold one smoothed-noise field per class; later classes win."""
    label = np.zeros((cfg.image_size, cfg.image_size), dtype=np.uint8)
    for k in range(1, cfg.num_classes):
        field = _blob_field(cfg, rng)
        threshold = np.quantile(field, 1.0 - cfg.blob_fraction)
        label[field > threshold] = k
    return LabelMap(label, cfg.num_classes)


def majority_downsample(label: LabelMap, out_size: int) -> np.ndarray:
    """Blockwise majority vote; ties resolve to the lowest class."""
    v = label.values
    b = v.shape[0] // out_size
    blocks = v.reshape(out_size, b, out_size, b).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(out_size, out_size, b * b)
    counts = (blocks[..., None] == np.arange(label.num_classes)).sum(axis=2)
    return np.argmax(counts, axis=2)


def gen_sample(cfg: SynthConfig, rng: SeededRng):
    """(label map, source features, target features) for one geometry.

    Feature values are rounded to float32 precision so they survive the
    on-disk format bit-for-bit.
    """
    protos, gain, offset = domain_params(cfg)
    label = gen_label(cfg, rng)
    grid = majority_downsample(label, cfg.feature_size)
    clean = protos[:, grid]                                    # (C, h, w)
    shape = clean.shape
    source = clean + cfg.noise * rng.normal(shape)
    target = (
        gain[:, None, None] * clean
        + offset[:, None, None]
        + cfg.noise * rng.normal(shape)
    )
    return (
        label,
        FeatureMap(as_float32(source)),
        FeatureMap(as_float32(target)),
    )


def gen_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Write SHT1 samples plus a manifest; target labels are eval-only.

    Per-sample streams are derived from (seed, sample index), so generation
    order never affects content.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = SeededRng(cfg.seed)
    samples = []
    for domain, count in (("source", cfg.n_source), ("target", cfg.n_target)):
        for i in range(count):
            index = i if domain == "source" else cfg.n_source + i
            label, src_feat, tgt_feat = gen_sample(cfg, root.spawn(1 + index))
            feat = src_feat if domain == "source" else tgt_feat
            sid = f"{domain[0]}{i:04d}"
            label_path = f"{sid}_label.sht"
            feat_path = f"{sid}_feat.sht"
            write_tensor(out / label_path, label)
            write_tensor(out / feat_path, feat)
            samples.append(
                {
                    "id": sid,
                    "domain": domain,
                    "label_path": label_path,
                    "feature_path": feat_path,
                    "eval_only": domain == "target",
                }
            )
    manifest = {"seed": cfg.seed, "config": asdict(cfg), "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def load_dataset(manifest_path):
    """Read a generated dataset back as (source samples, target samples)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = load_manifest(path)
    base = path.parent
    num_classes = manifest["config"]["num_classes"]
    source, target = [], []
    for entry in manifest["samples"]:
        label = read_tensor(base / entry["label_path"], kind="label", num_classes=num_classes)
        feat = read_tensor(base / entry["feature_path"])
        sample = Sample(feature=feat, label=label)
        (target if entry["domain"] == "target" else source).append(sample)
    return source, target, manifest


def in_memory_dataset(cfg: SynthConfig):
    """Generate the dataset without touching disk (for experiments/tests)."""
    root = SeededRng(cfg.seed)
    source, target = [], []
    for i in range(cfg.n_source):
        label, src_feat, _ = gen_sample(cfg, root.spawn(1 + i))
        source.append(Sample(feature=src_feat, label=label))
    for i in range(cfg.n_target):
        label, _, tgt_feat = gen_sample(cfg, root.spawn(1 + cfg.n_source + i))
        target.append(Sample(feature=tgt_feat, label=label))
    return source, target
