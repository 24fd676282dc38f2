"""
Synthetic World Module
Builds unit-sphere worlds with dialed concentration, separation, modality gap and
retrieval-cluster layout, and persists them to a directory
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import special

from adaptation_engine import SampleSet
from embedding_core import (
    ZERO_NORM,
    EmbeddingStore,
    UnitVector,
    VectorLike,
    as_array,
    normalize_rows,
    read_store,
    write_store,
)
from errors import (
    InvalidWorld,
    InvalidWorldConfig,
    SeparationRejected,
    TooManyClasses,
    UnreachableSeparation,
)
from retrieval_engine import ClassAverages
from rng_streams import SeedLike, as_generator, substream

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 10_000
LAMBDA_GRID = np.round(np.arange(0.5, 1.0 + 1e-9, 0.01), 2)
MARGIN_SLACK = 1e-3
SEPARATION_TOL = 1e-3
CAP_TOL = 1e-6
WORLD_FORMAT = 1


class TauMode(str, Enum):
    MIRROR = "mirror"
    PERTURBED = "perturbed"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class WorldConfig:
    classes: int = 5
    dim: int = 16
    kappa: float = 0.2
    rho_c: float = 0.0
    nu_target: float = 0.6
    tau_mode: TauMode = TauMode.MIRROR
    tau_scale: float = 0.3
    adversarial_fraction: float = 1.0
    clusters_per_class: int = 1
    db_per_cluster: int = 64
    master_seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "tau_mode", TauMode(self.tau_mode))
        except ValueError:
            raise InvalidWorldConfig(f"unknown tau_mode {self.tau_mode!r}")
        if self.classes < 2:
            raise InvalidWorldConfig("a world needs at least 2 classes")
        if self.dim < 2:
            raise InvalidWorldConfig("embedding dimension must be at least 2")
        if not 0.0 <= self.kappa < 0.5:
            raise InvalidWorldConfig(f"kappa must lie in [0, 0.5), got {self.kappa!r}")
        if not 0.0 <= self.rho_c < 1.0:
            raise InvalidWorldConfig(f"rho_c must lie in [0, 1), got {self.rho_c!r}")
        if not 0.0 < self.nu_target <= 2.0:
            raise InvalidWorldConfig(f"nu_target must lie in (0, 2], got {self.nu_target!r}")
        if self.tau_scale < 0:
            raise InvalidWorldConfig("tau_scale must be non-negative")
        if not 0.0 < self.adversarial_fraction <= 1.0:
            raise InvalidWorldConfig("adversarial_fraction must lie in (0, 1]")
        if self.clusters_per_class < 1 or self.db_per_cluster < 1:
            raise InvalidWorldConfig("clusters_per_class and db_per_cluster must be positive")
        if self.master_seed < 0:
            raise InvalidWorldConfig("master_seed must be non-negative")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["tau_mode"] = self.tau_mode.value
        return data

    def with_overrides(self, **changes) -> "WorldConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    center: np.ndarray
    class_id: int
    kappa: float
    is_prototype: bool = False


@dataclass(frozen=True)
class World:
    config: WorldConfig
    prototypes: ClassAverages
    text: ClassAverages
    one_shot: ClassAverages
    clusters: Tuple[Cluster, ...]
    database: EmbeddingStore
    database_clusters: np.ndarray
    nu: float
    tau: float

    @property
    def classes(self) -> int:
        return self.prototypes.classes

    @property
    def dim(self) -> int:
        return self.prototypes.dim

    def cluster_centers(self) -> np.ndarray:
        return np.stack([cluster.center for cluster in self.clusters])

    def cluster_classes(self) -> np.ndarray:
        return np.array([cluster.class_id for cluster in self.clusters], dtype=np.int64)

    def prototype_cluster(self, c: int) -> Cluster:
        return self.clusters[c - 1]

    def cluster_rows(self, cluster_id: int) -> np.ndarray:
        return self.database.matrix()[self.database_clusters == cluster_id]


# Measurements on class matrices

def measure_separation(prototypes: ClassAverages) -> float:
    """nu = 1 - max_{i != j} s_i^T s_j."""
    gram = prototypes.columns.T @ prototypes.columns
    np.fill_diagonal(gram, -np.inf)
    return float(1.0 - gram.max())


def measure_modality_gap(text: ClassAverages, prototypes: ClassAverages) -> float:
    """tau = max_{i != j} (t_j - t_i)^T s_i."""
    cross = text.columns.T @ prototypes.columns  # cross[j, i] = t_j^T s_i
    gaps = cross - np.diag(cross)[None, :]
    np.fill_diagonal(gaps, -np.inf)
    return float(gaps.max())


# Cap sampling

def _cap_weight(kappa: float) -> float:
    return min(kappa * kappa / 4.0, 1.0)


def cap_distance_cdf(r, kappa: float, dim: int):
    """CDF of the chordal distance to the centre for a uniform draw from the kappa-cap."""
    a = (dim - 1) / 2.0
    cap = _cap_weight(kappa)
    if cap == 0.0:
        return np.where(np.asarray(r) >= 0.0, 1.0, 0.0)
    w = np.minimum(np.square(np.asarray(r, dtype=np.float64)) / 4.0, cap)
    return special.betainc(a, a, w) / special.betainc(a, a, cap)


def uniform_sphere(n: int, dim: int, seed: SeedLike) -> np.ndarray:
    rng = as_generator(seed)
    return normalize_rows(rng.standard_normal((n, dim)))


def sample_caps(centers: np.ndarray, kappa: float, rho_c: float, seed: SeedLike) -> np.ndarray:
    """
    One draw per centre row from the cap/outlier mixture.

    With probability 1 - rho_c the draw is uniform on {u : |u - c| <= kappa},
    otherwise uniform on the whole sphere. (1 - cos theta) / 2 of a uniform
    sphere point follows Beta(a, a) with a = (d - 1) / 2, so the cap radius
    is drawn by inverting the truncated incomplete beta function. Every
    random array is drawn regardless of kappa and rho_c so streams stay
    aligned across settings.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    rng = as_generator(seed)
    n, d = centers.shape
    a = (d - 1) / 2.0
    cap = _cap_weight(kappa)

    u = rng.random(n)
    pick = rng.random(n)
    tangent = rng.standard_normal((n, d))
    free = rng.standard_normal((n, d))

    w = special.betaincinv(a, a, u * special.betainc(a, a, cap)) if cap > 0 else np.zeros(n)
    cos_t = 1.0 - 2.0 * w
    sin_t = 2.0 * np.sqrt(np.clip(w * (1.0 - w), 0.0, None))

    tangent -= np.sum(tangent * centers, axis=1, keepdims=True) * centers
    t_norm = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = np.divide(tangent, t_norm, out=np.zeros_like(tangent), where=t_norm > ZERO_NORM)

    points = cos_t[:, None] * centers + sin_t[:, None] * tangent
    points = normalize_rows(points)
    exact = w == 0.0
    points[exact] = centers[exact]

    outliers = pick < rho_c
    if np.any(outliers):
        points[outliers] = normalize_rows(free[outliers])
    return points


def sample_class_point(center: VectorLike, kappa: float, rho_c: float, seed: SeedLike) -> UnitVector:
    return UnitVector(sample_caps(as_array(center)[None, :], kappa, rho_c, seed)[0])


# Prototypes and text

def random_rotation(dim: int, seed: SeedLike) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    rng = as_generator(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))[None, :]


def simplex_max_separation(classes: int) -> float:
    return 1.0 + 1.0 / (classes - 1)


def make_prototypes(classes: int, dim: int, nu_target: float, seed: SeedLike) -> ClassAverages:
    """
    Randomly rotated regular simplex lifted along one orthogonal axis.

    Vertex i becomes a * v_i + b * m with a^2 = nu (C - 1) / C and a^2 + b^2 = 1,
    giving pairwise inner products of exactly 1 - nu.
    """
    if classes < 2:
        raise InvalidWorldConfig("at least 2 classes are needed")
    if classes > dim + 1:
        raise TooManyClasses(f"{classes} classes do not fit a regular simplex in dimension {dim}")
    nu_max = simplex_max_separation(classes)
    if not 0.0 < nu_target <= nu_max + 1e-12:
        raise UnreachableSeparation(f"nu = {nu_target} exceeds the simplex maximum {nu_max:.6g}")
    a2 = min(1.0, nu_target * (classes - 1) / classes)
    if a2 < 1.0 and classes == dim + 1:
        raise UnreachableSeparation(
            f"C = d + 1 = {classes} leaves no lift axis; only nu = {nu_max:.6g} is reachable"
        )

    centered = np.eye(classes) - 1.0 / classes
    basis, _ = np.linalg.qr(centered[:, :classes - 1])
    simplex = normalize_rows(centered) @ basis  # (C, C-1)

    rotation = random_rotation(dim, seed)
    frame = simplex @ rotation[:, :classes - 1].T
    axis = rotation[:, classes - 1] if classes - 1 < dim else np.zeros(dim)
    rows = math.sqrt(a2) * frame + math.sqrt(1.0 - a2) * axis[None, :]
    return ClassAverages.from_rows(normalize_rows(rows))


def _adversarial_anchor(c: int, prototypes: ClassAverages, clusters: Sequence[Cluster]) -> int:
    s = prototypes.columns[:, c - 1]
    wrong = [k for k in clusters if k.class_id != c and not k.is_prototype]
    if not wrong:
        wrong = [k for k in clusters if k.class_id != c]
    sims = np.array([float(k.center @ s) for k in wrong])
    return wrong[int(np.argmax(sims))].cluster_id


def _adversarial_text(c: int, prototypes: ClassAverages, clusters: Sequence[Cluster], kappa: float) -> np.ndarray:
    s = prototypes.columns[:, c - 1]
    target = _adversarial_anchor(c, prototypes, clusters)
    anchor = clusters[target].center
    others = np.stack([k.center for k in clusters if k.cluster_id != target])
    for lam in LAMBDA_GRID:
        t = (1.0 - lam) * s + lam * anchor
        t = t / np.linalg.norm(t)
        margin = float(t @ anchor) - float(np.max(others @ t))
        if margin > 2.0 * kappa + MARGIN_SLACK:
            return t
    logger.warning(f"Class {c}: no blend clears the 2*kappa margin, using the anchor centre itself")
    return anchor.copy()


def make_text_embeddings(prototypes: ClassAverages, tau_mode: Union[TauMode, str], seed: SeedLike,
                         tau_scale: float = 0.3, clusters: Sequence[Cluster] = (),
                         kappa: float = 0.0, adversarial_fraction: float = 1.0) -> Tuple[ClassAverages, float]:
    """Text matrix T for the given mode, with its measured modality gap tau."""
    mode = TauMode(tau_mode)
    rows = prototypes.columns.T.copy()
    rng = as_generator(seed)

    if mode is TauMode.PERTURBED and tau_scale > 0:
        noise = rng.standard_normal(rows.shape)
        noise -= np.sum(noise * rows, axis=1, keepdims=True) * rows
        noise = normalize_rows(noise)
        rows = normalize_rows(rows + tau_scale * noise)
    elif mode is TauMode.ADVERSARIAL:
        if not clusters:
            raise InvalidWorld("adversarial text needs retrieval clusters")
        flipped = math.ceil(adversarial_fraction * prototypes.classes - 1e-12)
        for c in range(1, flipped + 1):
            rows[c - 1] = _adversarial_text(c, prototypes, clusters, kappa)

    text = ClassAverages.from_rows(rows)
    return text, measure_modality_gap(text, prototypes)


# Worlds

def _distractor_centers(config: WorldConfig, prototypes: ClassAverages) -> List[Cluster]:
    existing = [prototypes.columns[:, c] for c in range(config.classes)]
    extras: List[Cluster] = []
    next_id = config.classes
    for c in range(1, config.classes + 1):
        for _ in range(config.clusters_per_class - 1):
            rng = substream(config.master_seed, "distractor", next_id)
            for _ in range(MAX_REJECTIONS):
                candidate = uniform_sphere(1, config.dim, rng)[0]
                if np.all(1.0 - np.stack(existing) @ candidate >= config.nu_target):
                    break
            else:
                raise SeparationRejected(
                    f"no distractor for class {c} after {MAX_REJECTIONS} draws at nu = {config.nu_target}"
                )
            existing.append(candidate)
            extras.append(Cluster(next_id, candidate, c, config.kappa))
            next_id += 1
    return extras


def make_world(config: WorldConfig) -> World:
    """Prototypes, retrieval clusters and database, one-shot support, then text."""
    prototypes = make_prototypes(config.classes, config.dim, config.nu_target,
                                 substream(config.master_seed, "prototypes"))
    clusters = [
        Cluster(c - 1, prototypes.columns[:, c - 1].copy(), c, config.kappa, True)
        for c in range(1, config.classes + 1)
    ]
    clusters.extend(_distractor_centers(config, prototypes))

    rows, labels, owners = [], [], []
    for cluster in clusters:
        centers = np.broadcast_to(cluster.center, (config.db_per_cluster, config.dim))
        rows.append(sample_caps(centers, cluster.kappa, 0.0,
                                substream(config.master_seed, "database", cluster.cluster_id)))
        labels.extend([cluster.class_id] * config.db_per_cluster)
        owners.extend([cluster.cluster_id] * config.db_per_cluster)
    database = EmbeddingStore(np.concatenate(rows), np.array(labels))

    shots = np.stack([
        sample_caps(prototypes.columns[:, c - 1][None, :], config.kappa, 0.0,
                    substream(config.master_seed, "one_shot", c))[0]
        for c in range(1, config.classes + 1)
    ])
    text, tau = make_text_embeddings(
        prototypes, config.tau_mode, substream(config.master_seed, "text"),
        config.tau_scale, clusters, config.kappa, config.adversarial_fraction,
    )
    world = World(
        config=config,
        prototypes=prototypes,
        text=text,
        one_shot=ClassAverages.from_rows(shots),
        clusters=tuple(clusters),
        database=database,
        database_clusters=np.array(owners, dtype=np.int64),
        nu=measure_separation(prototypes),
        tau=tau,
    )
    logger.info(
        f"Built world: C={config.classes} d={config.dim} kappa={config.kappa} "
        f"nu={world.nu:.4f} tau={world.tau:.4f} clusters={len(clusters)} db={len(database)}"
    )
    return world


def validate_world(world: World) -> World:
    """Raise InvalidWorld unless the world's construction guarantees hold."""
    config = world.config
    if abs(world.nu - config.nu_target) > SEPARATION_TOL:
        raise InvalidWorld(f"measured nu {world.nu:.6g} misses target {config.nu_target}")
    gaps = np.linalg.norm(world.one_shot.columns - world.prototypes.columns, axis=0)
    if np.any(gaps > config.kappa + CAP_TOL):
        raise InvalidWorld(f"one-shot sample of class {int(np.argmax(gaps)) + 1} leaves its cap")
    centers = world.cluster_centers()
    owners = centers[world.database_clusters]
    spread = np.linalg.norm(world.database.matrix() - owners, axis=1)
    if np.any(spread > config.kappa + CAP_TOL):
        raise InvalidWorld(f"database row {int(np.argmax(spread))} leaves its cluster cap")
    if len(centers) > 1:
        gram = centers @ centers.T
        np.fill_diagonal(gram, -np.inf)
        if 1.0 - gram.max() < config.nu_target - SEPARATION_TOL:
            raise InvalidWorld("cluster centres are closer than nu")
    return world


def sample_target_set(world: World, n: int, seed: SeedLike) -> SampleSet:
    """n test points: uniform labels, z drawn from the class's cap/outlier mixture."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = as_generator(seed)
    labels = rng.integers(1, world.classes + 1, size=n)
    centers = world.prototypes.columns[:, labels - 1].T
    z = sample_caps(centers, world.config.kappa, world.config.rho_c, rng)
    return SampleSet(z, labels)


# Persistence

def save_world(world: World, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    class_ids = np.arange(1, world.classes + 1)
    write_store(directory / "prototypes.raeb", EmbeddingStore(world.prototypes.columns.T, class_ids))
    write_store(directory / "text.raeb", EmbeddingStore(world.text.columns.T, class_ids))
    write_store(directory / "one_shot.raeb", EmbeddingStore(world.one_shot.columns.T, class_ids))
    write_store(directory / "clusters.raeb", EmbeddingStore(world.cluster_centers(), world.cluster_classes()))
    write_store(directory / "database.raeb", world.database)
    (directory / "database_clusters.json").write_text(
        json.dumps([int(i) for i in world.database_clusters]), encoding="utf-8"
    )
    manifest = {
        "format": WORLD_FORMAT,
        "config": world.config.to_dict(),
        "clusters": [
            {"id": k.cluster_id, "class": k.class_id, "kappa": k.kappa, "is_prototype": k.is_prototype}
            for k in world.clusters
        ],
        "nu": world.nu,
        "tau": world.tau,
        "kappa_cosine": 1.0 - world.config.kappa ** 2 / 2.0,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info(f"World saved to {directory}")
    return directory


def _class_matrix(path: Path) -> ClassAverages:
    # float32 storage drifts off unit norm by ~1e-7; restore it in float64
    return ClassAverages.from_rows(normalize_rows(read_store(path).matrix()))


def load_world(directory: Union[str, Path]) -> World:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        owners = json.loads((directory / "database_clusters.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidWorld(f"{directory}: unreadable world manifest: {e}")
    if manifest.get("format") != WORLD_FORMAT:
        raise InvalidWorld(f"{directory}: unsupported world format {manifest.get('format')!r}")

    config = WorldConfig(**manifest["config"])
    prototypes = _class_matrix(directory / "prototypes.raeb")
    text = _class_matrix(directory / "text.raeb")
    centers = normalize_rows(read_store(directory / "clusters.raeb").matrix())
    clusters = tuple(
        Cluster(int(row["id"]), centers[i], int(row["class"]), float(row["kappa"]), bool(row["is_prototype"]))
        for i, row in enumerate(manifest["clusters"])
    )
    database = read_store(directory / "database.raeb")
    if len(owners) != len(database):
        raise InvalidWorld(f"{directory}: cluster ids do not match the database size")
    return World(
        config=config,
        prototypes=prototypes,
        text=text,
        one_shot=_class_matrix(directory / "one_shot.raeb"),
        clusters=clusters,
        database=database,
        database_clusters=np.array(owners, dtype=np.int64),
        nu=measure_separation(prototypes),
        tau=measure_modality_gap(text, prototypes),
    )
