"""
Retrieval Engine Module
Exact top-K retrieval (T2I / I2I), cache construction, class averages and oracle retrieval
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from embedding_core import (
    STORED_UNIT_TOL,
    UNIT_TOL,
    ZERO_NORM,
    EmbeddingStore,
    UnitVector,
    VectorLike,
    as_array,
    read_store,
    write_store,
)
from errors import (
    BudgetExceedsDatabase,
    DimensionMismatch,
    EmptyQueryClass,
    InvalidWorld,
    NormViolation,
    ZeroVector,
)
from rng_streams import SeedLike, as_generator

logger = logging.getLogger(__name__)

DEFAULT_OMEGA = 1.0


class RetrievalMode(str, Enum):
    T2I = "T2I"
    I2I = "I2I"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Cache:
    """
    d x (C*K) retrieved-feature matrix, class-major.

    Column j belongs to class j // K + 1, which is the implicit one-hot value
    matrix V. Fine-tuned caches relax the unit-norm invariant to finiteness.
    """

    columns: np.ndarray
    classes: int
    shots: int
    omega: float = DEFAULT_OMEGA
    finetuned: bool = False

    def __post_init__(self):
        columns = np.array(self.columns, dtype=np.float64, copy=True)
        if columns.ndim != 2:
            raise DimensionMismatch(f"cache columns need shape (d, C*K), got {columns.shape}")
        if self.classes < 1 or self.shots < 1:
            raise ValueError("a cache needs at least one class and one shot")
        if columns.shape[1] != self.classes * self.shots:
            raise DimensionMismatch(
                f"cache has {columns.shape[1]} columns, expected C*K = {self.classes * self.shots}"
            )
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega!r}")
        if not np.all(np.isfinite(columns)):
            raise NormViolation("cache holds non-finite values")
        if not self.finetuned:
            norms = np.linalg.norm(columns, axis=0)
            bad = np.flatnonzero(np.abs(norms - 1.0) > STORED_UNIT_TOL)
            if bad.size:
                raise NormViolation(f"cache column {int(bad[0])} has norm {norms[bad[0]]!r}")
        object.__setattr__(self, "columns", _frozen(columns))
        object.__setattr__(self, "omega", float(self.omega))

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    def class_of_column(self) -> np.ndarray:
        """1-based class id per column."""
        return np.arange(self.classes * self.shots) // self.shots + 1

    def class_block(self, c: int) -> np.ndarray:
        """d x K block of class c (1-based)."""
        start = (c - 1) * self.shots
        return self.columns[:, start:start + self.shots]

    def with_columns(self, columns: np.ndarray, finetuned: bool = True) -> "Cache":
        return Cache(columns, self.classes, self.shots, self.omega, finetuned)


@dataclass(frozen=True)
class ClassAverages:
    """d x C matrix of unit-norm class columns (K-bar, S-bar, S or T)."""

    columns: np.ndarray

    def __post_init__(self):
        columns = np.array(self.columns, dtype=np.float64, copy=True)
        if columns.ndim != 2 or columns.shape[0] < 2:
            raise DimensionMismatch(f"class matrix needs shape (d, C), got {columns.shape}")
        norms = np.linalg.norm(columns, axis=0)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise NormViolation(f"class column {int(bad[0]) + 1} has norm {norms[bad[0]]!r}")
        object.__setattr__(self, "columns", _frozen(columns))

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def classes(self) -> int:
        return self.columns.shape[1]

    def column(self, c: int) -> UnitVector:
        return UnitVector(self.columns[:, c - 1])

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "ClassAverages":
        return cls(np.asarray(rows, dtype=np.float64).T)


@dataclass(frozen=True)
class QuerySet:
    """Per-class retrieval queries: one text embedding (T2I) or >= 1 seed images (I2I)."""

    mode: RetrievalMode
    queries: Tuple[np.ndarray, ...]

    def __post_init__(self):
        mode = RetrievalMode(self.mode)
        blocks = []
        for c, block in enumerate(self.queries, start=1):
            block = np.atleast_2d(np.asarray(block, dtype=np.float64))
            if block.shape[0] == 0:
                raise EmptyQueryClass(f"class {c} has no queries")
            if mode is RetrievalMode.T2I and block.shape[0] != 1:
                raise ValueError(f"T2I takes exactly one text query per class, class {c} has {block.shape[0]}")
            norms = np.linalg.norm(block, axis=1)
            if np.any(np.abs(norms - 1.0) > STORED_UNIT_TOL):
                raise NormViolation(f"class {c} has a non-unit query")
            blocks.append(_frozen(block.copy()))
        if not blocks:
            raise EmptyQueryClass("query set has no classes")
        dims = {b.shape[1] for b in blocks}
        if len(dims) != 1:
            raise DimensionMismatch(f"queries disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "queries", tuple(blocks))

    @property
    def classes(self) -> int:
        return len(self.queries)

    @property
    def dim(self) -> int:
        return self.queries[0].shape[1]

    @classmethod
    def text(cls, text: ClassAverages) -> "QuerySet":
        return cls(RetrievalMode.T2I, tuple(text.columns[:, c][None, :] for c in range(text.classes)))

    @classmethod
    def seeds(cls, per_class: Sequence[np.ndarray]) -> "QuerySet":
        return cls(RetrievalMode.I2I, tuple(per_class))


def _top_k_from_scores(scores: np.ndarray, k: int) -> np.ndarray:
    # similarity descending, ties by ascending index
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


def top_k(db: EmbeddingStore, q: VectorLike, k: int) -> List[Tuple[int, float]]:
    """The k database rows most similar to q as (0-based index, similarity) pairs."""
    query = as_array(q)
    if query.shape != (db.dim,):
        raise DimensionMismatch(f"query has shape {query.shape}, database dim is {db.dim}")
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(db):
        raise BudgetExceedsDatabase(f"asked for {k} items from a database of {len(db)}")
    scores = np.clip(db.matrix() @ query, -1.0, 1.0)
    picked = _top_k_from_scores(scores, k)
    return [(int(i), float(scores[i])) for i in picked]


def query_scores(db_matrix: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Score of each database row against a class's queries: max over the queries."""
    sims = np.clip(db_matrix @ queries.T, -1.0, 1.0)
    return sims.max(axis=1)


def build_cache(db: EmbeddingStore, queries: QuerySet, k: int, omega: float = DEFAULT_OMEGA) -> Cache:
    """
    Retrieve k items per class and assemble a class-major cache.

    T2I scores rows by cosine with t_c; I2I by the maximum cosine over the
    class's seeds. The same row may serve several classes.
    """
    if queries.dim != db.dim:
        raise DimensionMismatch(f"queries have dim {queries.dim}, database has {db.dim}")
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(db):
        raise BudgetExceedsDatabase(f"asked for {k} items per class from a database of {len(db)}")

    matrix = db.matrix()
    blocks = []
    for block in queries.queries:
        picked = _top_k_from_scores(query_scores(matrix, block), k)
        blocks.append(matrix[picked])
    columns = np.concatenate(blocks, axis=0).T
    logger.debug(f"Built {queries.mode.value} cache: C={queries.classes} K={k} omega={omega}")
    return Cache(columns, queries.classes, k, omega)


def cache_from_rows(per_class_rows: Sequence[np.ndarray], omega: float = DEFAULT_OMEGA) -> Cache:
    """Stack equally sized per-class row blocks into a cache."""
    shots = {np.atleast_2d(rows).shape[0] for rows in per_class_rows}
    if len(shots) != 1:
        raise DimensionMismatch(f"classes disagree on shot count: {sorted(shots)}")
    columns = np.concatenate([np.atleast_2d(rows) for rows in per_class_rows], axis=0).T
    return Cache(columns, len(per_class_rows), shots.pop(), omega)


def nearest_cluster(world, query: VectorLike) -> int:
    """Index of the cluster centre most similar to the query (ties -> lowest id)."""
    if not world.clusters:
        raise InvalidWorld("world has no retrieval clusters")
    centers = world.cluster_centers()
    q = as_array(query)
    if q.shape != (centers.shape[1],):
        raise DimensionMismatch(f"query has shape {q.shape}, world dim is {centers.shape[1]}")
    return int(np.argmax(np.clip(centers @ q, -1.0, 1.0)))


def oracle_retrieve(world, query: VectorLike, k: int, seed: SeedLike) -> np.ndarray:
    """
    Retrieval as uniform sampling from the query's closest cluster.

    Returns a (k, d) array of draws from that cluster's cap distribution
    (outlier mass 0).
    """
    from synthetic_world import sample_caps

    if k < 1:
        raise ValueError("k must be positive")
    cluster = world.clusters[nearest_cluster(world, query)]
    rng = as_generator(seed)
    centers = np.broadcast_to(cluster.center, (k, cluster.center.shape[0]))
    return sample_caps(centers, cluster.kappa, 0.0, rng)


def class_averages(cache: Cache) -> ClassAverages:
    """Normalized per-class mean of the cache columns."""
    blocks = cache.columns.reshape(cache.dim, cache.classes, cache.shots)
    means = blocks.mean(axis=2)
    norms = np.linalg.norm(means, axis=0)
    if np.any(norms <= ZERO_NORM):
        c = int(np.argmin(norms)) + 1
        raise ZeroVector(f"class {c} cache mean vanishes")
    if cache.shots == 1 and np.all(np.abs(norms - 1.0) <= UNIT_TOL):
        # a single unit column is already its own normalized mean
        return ClassAverages(means)
    return ClassAverages(means / norms)


def materialize_v(classes: int, shots: int) -> np.ndarray:
    """The C x (C*K) one-hot value matrix, V[i, j] = 1 iff i == j // K."""
    rows = np.arange(classes)[:, None]
    cols = np.arange(classes * shots)[None, :] // shots
    return (rows == cols).astype(np.int64)


def unnormalized_class_means(cache: Cache) -> np.ndarray:
    """K-tilde = K V^T / K via the explicit value matrix."""
    v = materialize_v(cache.classes, cache.shots)
    return cache.columns @ v.T / cache.shots


def write_cache(path: Union[str, Path], cache: Cache) -> None:
    """Columns go to an RAEB file; C, K, omega to a JSON sidecar."""
    path = Path(path)
    if cache.finetuned:
        raise NormViolation("fine-tuned caches are not unit-norm and cannot be stored as RAEB")
    store = EmbeddingStore(cache.columns.T, cache.class_of_column())
    write_store(path, store)
    header = {"classes": cache.classes, "shots": cache.shots, "omega": cache.omega}
    _sidecar(path).write_text(json.dumps(header, indent=2), encoding="utf-8")


def read_cache(path: Union[str, Path]) -> Cache:
    path = Path(path)
    header = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    store = read_store(path)
    return Cache(store.matrix().T, int(header["classes"]), int(header["shots"]), float(header["omega"]))


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")
