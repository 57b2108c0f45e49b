import numpy as np
import pytest

from shapeuda import (
    IGNORE,
    FeatureMap,
    LabelMap,
    PredictionEnsemble,
    ProbMap,
    SeededRng,
    ValidationError,
    argmax_map,
    read_tensor,
    write_tensor,
)
from shapeuda.tensors import (
    BadMagicError,
    FormatError,
    ShapeError,
    TruncatedPayloadError,
    UnknownDtypeError,
    as_float32,
    read_array,
)


def seeded_feature(seed, c=4, h=6, w=5):
    return FeatureMap(as_float32(SeededRng(seed).normal((c, h, w))))


def test_zero_map_roundtrip(tmp_path):
    path = tmp_path / "z.sht"
    fm = FeatureMap(np.zeros((1, 2, 2)))
    write_tensor(path, fm)
    blob = path.read_bytes()
    assert blob[:4] == b"SHT1"
    assert len(blob) == 4 + 2 + 3 * 4 + 16  # magic, dtype+rank, dims, payload
    back = read_tensor(path)
    assert np.array_equal(back.values, fm.values)


def test_all_ignore_labelmap_payload(tmp_path):
    path = tmp_path / "ig.sht"
    lm = LabelMap(np.full((3, 3), IGNORE, dtype=np.uint8), num_classes=4)
    write_tensor(path, lm)
    assert path.read_bytes()[-9:] == b"\xff" * 9
    back = read_tensor(path, kind="label")
    assert np.array_equal(back.values, lm.values)


def test_invalid_probmap_write_refused(tmp_path):
    bad = ProbMap(np.full((2, 2, 2), 0.9), validate=False)
    with pytest.raises(ValidationError):
        write_tensor(tmp_path / "bad.sht", bad)
    with pytest.raises(ValidationError):
        ProbMap(np.full((2, 2, 2), 0.9))


def test_feature_roundtrip_seeded(tmp_path):
    fm = seeded_feature(3, c=8, h=16, w=16)
    path = tmp_path / "f.sht"
    write_tensor(path, fm)
    assert np.array_equal(read_tensor(path).values, fm.values)


def test_probmap_roundtrip(tmp_path):
    logits = SeededRng(4).normal((3, 5, 5))
    e = np.exp(logits - logits.max(axis=0))
    p = ProbMap(as_float32(e / e.sum(axis=0)), validate=False)
    # f32 rounding keeps sums within the 1e-5 invariant
    p.check()
    path = tmp_path / "p.sht"
    write_tensor(path, p)
    back = read_tensor(path, kind="prob")
    assert np.array_equal(back.values, p.values)


def test_roundtrip_many_shapes(tmp_path):
    rng = SeededRng(9)
    for shape in [(1, 1, 1), (2, 3, 7), (8, 64, 64), (8, 512, 512)]:
        fm = FeatureMap(as_float32(rng.normal(shape)))
        path = tmp_path / "s.sht"
        write_tensor(path, fm)
        assert np.array_equal(read_tensor(path).values, fm.values)
    lm = LabelMap(rng.integers(0, 5, (512, 512)).astype(np.uint8), 5)
    write_tensor(tmp_path / "l.sht", lm)
    assert np.array_equal(read_tensor(tmp_path / "l.sht", kind="label").values, lm.values)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.sht"
    write_tensor(path, seeded_feature(1))
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_tensor(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.sht"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_unknown_dtype(tmp_path):
    path = tmp_path / "d.sht"
    write_tensor(path, seeded_feature(1))
    blob = bytearray(path.read_bytes())
    blob[4] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(UnknownDtypeError):
        read_tensor(path)


def test_dims_overflow(tmp_path):
    path = tmp_path / "o.sht"
    import struct

    path.write_bytes(b"SHT1" + bytes([0, 3]) + struct.pack("<3I", 2**20, 2**20, 4))
    with pytest.raises(FormatError):
        read_array(path)


def test_kind_mismatch_rejected(tmp_path):
    fpath = tmp_path / "f.sht"
    write_tensor(fpath, seeded_feature(2))
    with pytest.raises(FormatError):
        read_tensor(fpath, kind="label")
    lpath = tmp_path / "l.sht"
    write_tensor(lpath, LabelMap(np.zeros((2, 2), dtype=np.uint8), 2))
    with pytest.raises(FormatError):
        read_tensor(lpath, kind="prob")


def test_argmax_one_hot_inverse():
    labels = LabelMap(np.array([[0, 2], [1, 0]], dtype=np.uint8), 3)
    one_hot = np.zeros((3, 2, 2))
    for r in range(2):
        for c in range(2):
            one_hot[labels.values[r, c], r, c] = 1.0
    assert np.array_equal(argmax_map(ProbMap(one_hot)).values, labels.values)


def test_argmax_tiebreak_and_strict_max():
    p = ProbMap(np.full((4, 1, 1), 0.25))
    assert argmax_map(p).values[0, 0] == 0
    p = ProbMap(np.array([0.1, 0.6, 0.3]).reshape(3, 1, 1))
    assert argmax_map(p).values[0, 0] == 1


def test_argmax_permutation_equivariance():
    rng = SeededRng(21)
    logits = rng.normal((5, 9, 9))
    e = np.exp(logits - logits.max(axis=0))
    probs = e / e.sum(axis=0)
    # add distinct jitter so no pixel has ties across classes
    probs = probs + rng.uniform((5, 9, 9)) * 1e-9
    perm = np.array([3, 0, 4, 1, 2])
    base = argmax_map(ProbMap(probs, validate=False)).values
    permuted = argmax_map(ProbMap(probs[perm], validate=False)).values
    # relabel: position i of perm holds old class perm[i]
    inverse = np.argsort(perm)
    assert np.array_equal(inverse[base], permuted)


def test_label_invariants():
    with pytest.raises(ValidationError):
        LabelMap(np.array([[5]], dtype=np.uint8), num_classes=3)
    with pytest.raises(ShapeError):
        LabelMap(np.zeros(4, dtype=np.uint8), num_classes=2)


def test_ensemble_shape_checks():
    a = ProbMap(np.full((2, 2, 2), 0.5))
    b = ProbMap(np.full((2, 3, 2), 0.5))
    with pytest.raises(ShapeError):
        PredictionEnsemble((a, b))
    with pytest.raises(ValidationError):
        PredictionEnsemble((a,))
