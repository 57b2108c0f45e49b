"""Shared tensor/mask types and the SHT1 on-disk tensor format.

SHT1 layout: 4 magic bytes ``SHT1``, one dtype byte (0 = float32, 1 = uint8),
one rank byte, ``rank`` little-endian uint32 dims, then the raw payload in
C order (slowest dim first), little endian.  This is the only persistence
format for tensors; dense float payloads are stored at float32 precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IGNORE = 255

MAGIC = b"SHT1"
DTYPE_F32 = 0
DTYPE_U8 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}
_MAX_ELEMENTS = 1 << 31


class TensorError(Exception):
    """Base for all tensor type and format errors."""


class FormatError(TensorError):
    """Unreadable or corrupt SHT1 file."""


class BadMagicError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ShapeError(TensorError):
    """Incompatible array shapes or dims."""


class ValidationError(TensorError):
    """A domain-type invariant does not hold."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense C x H x W grid of real-valued activations."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"feature map must be (C, H, W), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """H x W integer mask with classes {0..K-1} plus the IGNORE sentinel."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or min(v.shape) < 1:
            raise ShapeError(f"label map must be (H, W), got {v.shape}")
        if not (2 <= self.num_classes <= IGNORE):
            raise ValidationError(f"num_classes must be in [2, {IGNORE}]")
        v = v.astype(np.uint8, casting="unsafe") if v.dtype != np.uint8 else v
        valid = v[v != IGNORE]
        if valid.size and int(valid.max()) >= self.num_classes:
            raise ValidationError(
                f"label {int(valid.max())} outside {self.num_classes} classes"
            )
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ProbMap:
    """K x H x W per-pixel class probabilities (pixel sums equal one)."""

    values: np.ndarray
    validate: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"prob map must be (K, H, W), got {v.shape}")
        object.__setattr__(self, "values", v)
        if self.validate:
            self.check()

    def check(self):
        """Raise ValidationError if the probability invariants are violated."""
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValidationError("probabilities contain non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError("probabilities outside [0, 1]")
        sums = v.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValidationError("per-pixel probabilities do not sum to 1")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PredictionEnsemble:
    """Aligned probability maps predicted from one sample's feature variants."""

    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise ValidationError("ensemble needs at least 2 members")
        shape = members[0].values.shape
        for m in members[1:]:
            if m.values.shape != shape:
                raise ShapeError("ensemble members disagree on (K, H, W)")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def stacked(self) -> np.ndarray:
        """(N, K, H, W) view of the member probabilities."""
        return np.stack([m.values for m in self.members])

    def mean(self) -> ProbMap:
        return ProbMap(self.stacked().mean(axis=0), validate=False)


def argmax_map(p: ProbMap) -> LabelMap:
    """Hard per-pixel argmax; ties resolve to the lowest class index."""
    return LabelMap(np.argmax(p.values, axis=0).astype(np.uint8), p.num_classes)


def write_array(path, arr: np.ndarray) -> None:
    """Write a raw float32/uint8 array in SHT1 layout."""
    if arr.dtype == np.uint8:
        code = DTYPE_U8
    else:
        code = DTYPE_F32
        arr = arr.astype("<f4")
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()
    Path(path).write_bytes(MAGIC + bytes([code, arr.ndim]) + dims + payload)


def read_array(path) -> np.ndarray:
    """Read an SHT1 file back into a float32 or uint8 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an SHT1 file")
    code, rank = blob[4], blob[5]
    if code not in _DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    header_end = 6 + 4 * rank
    if len(blob) < header_end:
        raise TruncatedPayloadError(f"{path}: truncated dim header")
    dims = struct.unpack(f"<{rank}I", blob[6:header_end])
    if rank < 1 or any(d == 0 for d in dims) or int(np.prod(dims)) > _MAX_ELEMENTS:
        raise FormatError(f"{path}: dims {dims} overflow")
    dtype = _DTYPES[code]
    expected = header_end + int(np.prod(dims)) * dtype.itemsize
    if len(blob) != expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} bytes, file has {len(blob)}"
        )
    return np.frombuffer(blob[header_end:], dtype=dtype).reshape(dims).copy()


def write_tensor(path, payload) -> None:
    """Persist a FeatureMap, ProbMap, or LabelMap; invariants re-checked."""
    if isinstance(payload, LabelMap):
        write_array(path, payload.values)
    elif isinstance(payload, ProbMap):
        payload.check()
        write_array(path, payload.values)
    elif isinstance(payload, FeatureMap):
        write_array(path, payload.values)
    else:
        raise TypeError(f"cannot serialize {type(payload).__name__}")


def read_tensor(path, kind: str | None = None, num_classes: int | None = None):
    """Load a typed payload from an SHT1 file.

    The header carries no payload-kind tag, so rank-3 float data defaults to
    a FeatureMap; pass ``kind="prob"`` to reinterpret (and validate) it as a
    ProbMap.  LabelMap class count is inferred from the data unless given.
    """
    arr = read_array(path)
    if arr.dtype == np.uint8:
        if kind not in (None, "label"):
            raise FormatError(f"{path}: uint8 payload cannot be read as {kind}")
        if arr.ndim != 2:
            raise FormatError(f"{path}: label payload must be rank 2")
        if num_classes is None:
            valid = arr[arr != IGNORE]
            num_classes = max(2, int(valid.max()) + 1) if valid.size else 2
        return LabelMap(arr, num_classes)
    if kind == "label":
        raise FormatError(f"{path}: float payload cannot be read as label")
    if arr.ndim != 3:
        raise FormatError(f"{path}: float payload must be rank 3")
    if kind == "prob":
        return ProbMap(arr.astype(np.float64))
    return FeatureMap(arr.astype(np.float64))


def as_float32(values: np.ndarray) -> np.ndarray:
    """Round float64 data to float32 precision (keeps round-trips exact)."""
    return values.astype(np.float32).astype(np.float64)
