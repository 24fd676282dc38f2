"""
Embedding Core Module
Unit-norm embedding types, similarity, and the RAEB embedding-store file format
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from errors import (
    BadMagic,
    DimensionMismatch,
    InvalidLabel,
    NormViolation,
    TrailingBytes,
    TruncatedFile,
    UnsupportedFlags,
    UnsupportedVersion,
    ZeroVector,
)

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
UNIT_TOL = 1e-9
STORED_UNIT_TOL = 1e-6

MAGIC = b"RAEB"
FORMAT_VERSION = 1
FLAG_LABELS = 0x0001
_HEADER = struct.Struct("<4sHHIQ")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class UnitVector:
    """An l2-normalized embedding of dimension d >= 2."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] < 2:
            raise DimensionMismatch(f"unit vectors need shape (d,) with d >= 2, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NormViolation("unit vector has non-finite entries")
        norm = float(np.linalg.norm(values))
        if abs(norm - 1.0) > UNIT_TOL:
            raise NormViolation(f"unit vector norm {norm!r} deviates from 1")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __neg__(self) -> "UnitVector":
        return UnitVector(-self.values)

    def __len__(self) -> int:
        return self.dim


@dataclass(frozen=True, order=True)
class ClassId:
    """1-based class identifier."""

    value: int

    def __post_init__(self):
        if int(self.value) != self.value or self.value < 1:
            raise ValueError(f"class ids are 1-based positive integers, got {self.value!r}")
        object.__setattr__(self, "value", int(self.value))

    @property
    def index(self) -> int:
        return self.value - 1

    def check(self, classes: int) -> "ClassId":
        if self.value > classes:
            raise ValueError(f"class id {self.value} outside [1..{classes}]")
        return self


VectorLike = Union[UnitVector, np.ndarray, Sequence[float]]


def as_array(v: VectorLike) -> np.ndarray:
    if isinstance(v, UnitVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def normalize(v: VectorLike) -> UnitVector:
    """Scale v to unit l2 norm."""
    values = np.asarray(as_array(v), dtype=np.float64)
    norm = float(np.linalg.norm(values))
    if not norm > ZERO_NORM:
        raise ZeroVector(f"cannot normalize a vector of norm {norm!r}")
    return UnitVector(values / norm)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise normalize; raises ZeroVector on a vanishing row."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms <= ZERO_NORM):
        raise ZeroVector("cannot normalize a vanishing row")
    return matrix / norms


def _check_dims(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")


def cosine(a: VectorLike, b: VectorLike) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    x, y = as_array(a), as_array(b)
    _check_dims(x, y)
    # elementwise product is commutative and summed in index order,
    # so cosine(a, b) == cosine(b, a) bit for bit
    return float(min(1.0, max(-1.0, float(np.sum(x * y)))))


def chordal_distance(a: VectorLike, b: VectorLike) -> float:
    """Euclidean distance between unit vectors, sqrt(2 - 2 cos)."""
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * cosine(a, b))))


@dataclass(frozen=True)
class EmbeddingStore:
    """n unit vectors of dimension d, optionally with 1-based class labels."""

    vectors: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.dtype not in (np.float32, np.float64):
            vectors = vectors.astype(np.float64)
        vectors = np.array(vectors, copy=True)
        if vectors.ndim != 2 or vectors.shape[1] < 1:
            raise DimensionMismatch(f"store vectors need shape (n, d), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise NormViolation("store holds non-finite values")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > STORED_UNIT_TOL)
        if bad.size:
            raise NormViolation(f"row {int(bad[0])} has norm {norms[bad[0]]!r}")
        object.__setattr__(self, "vectors", _frozen(vectors))
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64, copy=True)
            if labels.shape != (vectors.shape[0],):
                raise DimensionMismatch("labels must have one entry per vector")
            if labels.size and labels.min() < 1:
                raise InvalidLabel("labels are 1-based class ids")
            object.__setattr__(self, "labels", _frozen(labels))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, index: int) -> UnitVector:
        return UnitVector(np.asarray(self.vectors[index], dtype=np.float64))

    def __iter__(self) -> Iterator[UnitVector]:
        for i in range(len(self)):
            yield self[i]

    def matrix(self) -> np.ndarray:
        """All rows as a float64 (n, d) array."""
        return np.asarray(self.vectors, dtype=np.float64)

    @classmethod
    def from_vectors(cls, vectors: Sequence[VectorLike], labels=None) -> "EmbeddingStore":
        rows = np.stack([as_array(v) for v in vectors])
        return cls(rows, labels)


def write_store(path: Union[str, Path], store: EmbeddingStore) -> None:
    """Write a store in the little-endian RAEB format."""
    n, d = store.vectors.shape
    flags = FLAG_LABELS if store.labels is not None else 0
    payload = [_HEADER.pack(MAGIC, FORMAT_VERSION, flags, d, n)]
    payload.append(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())
    if store.labels is not None:
        payload.append(np.ascontiguousarray(store.labels, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(payload))
    logger.debug(f"Wrote store {path}: n={n} d={d} labels={store.labels is not None}")


def read_store(path: Union[str, Path]) -> EmbeddingStore:
    """Read a RAEB file, validating the header, sizes and row norms."""
    data = Path(path).read_bytes()
    return decode_store(data, source=str(path))


def decode_store(data: bytes, source: str = "<bytes>") -> EmbeddingStore:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{source}: not an RAEB file")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{source}: header is truncated")
    _, version, flags, d, n = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{source}: version {version} is not supported")
    if flags & ~FLAG_LABELS:
        raise UnsupportedFlags(f"{source}: unknown flag bits {flags:#06x}")
    has_labels = bool(flags & FLAG_LABELS)

    body = n * d * 4
    expected = _HEADER.size + body + (n * 4 if has_labels else 0)
    if len(data) < expected:
        raise TruncatedFile(f"{source}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise TrailingBytes(f"{source}: {len(data) - expected} trailing bytes")

    offset = _HEADER.size
    vectors = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    vectors = vectors.astype(np.float32)
    labels = None
    if has_labels:
        raw = np.frombuffer(data, dtype="<u4", count=n, offset=offset + body)
        if n and raw.min() < 1:
            raise InvalidLabel(f"{source}: class ids are 1-based")
        labels = raw.astype(np.int64)

    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > STORED_UNIT_TOL)
    if bad.size:
        raise NormViolation(f"{source}: row {int(bad[0])} has norm {norms[bad[0]]!r}")
    return EmbeddingStore(vectors, labels)
