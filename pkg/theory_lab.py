"""
Theory Lab Module
Measures concentration, separation, modality gap, retrieval shift and event rates,
and evaluates the risk bounds of the adaptation heads as numeric checks
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from adaptation_engine import (
    LIPSCHITZ_CE,
    SampleSet,
    SamplesLike,
    as_sample_set,
    empirical_risk,
    gradient_norms,
    linear_head,
    linear_scores,
    predict_batch,
    zero_one_risk,
)
from embedding_core import ClassId, ZERO_NORM, as_array
from errors import AssumptionViolated, NegativeThresholdWarning, WeightSumViolation
from retrieval_engine import ClassAverages, RetrievalMode, nearest_cluster, oracle_retrieve
from rng_streams import SeedLike, as_generator, substream
from synthetic_world import World, measure_modality_gap, measure_separation, sample_caps

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-9
DEFAULT_DRAWS = 1_000_000
DRAW_CHUNK = 100_000
INTERPRETATION_NOTE = "modality term uses the max over test samples"


@dataclass(frozen=True)
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    context: Dict[str, object] = field(default_factory=dict)
    applicable: bool = True

    @property
    def satisfied(self) -> bool:
        return bool(self.lhs <= self.rhs + BOUND_SLACK)

    @property
    def failed(self) -> bool:
        """Only an applicable check can fail a verification run."""
        return self.applicable and not self.satisfied

    @classmethod
    def not_applicable(cls, name: str, reason: str, **context) -> "BoundCheck":
        context["reason"] = reason
        return cls(name, math.nan, math.nan, context, applicable=False)

    def as_row(self) -> Dict[str, str]:
        return {
            "name": self.name,
            "lhs": format(self.lhs, ".17g"),
            "rhs": format(self.rhs, ".17g"),
            "satisfied": str(self.satisfied).lower(),
            "applicable": str(self.applicable).lower(),
            "context": ";".join(f"{k}={_fmt(v)}" for k, v in self.context.items()),
        }


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


@dataclass(frozen=True)
class WorldStats:
    nu: float
    tau: float
    rho_c_hat: float
    kappa_used: float
    outlier_fraction: float

    @property
    def kappa_cosine(self) -> float:
        return 1.0 - self.kappa_used ** 2 / 2.0


@dataclass(frozen=True)
class RetrievalShift:
    mode: RetrievalMode
    xi: np.ndarray
    stderr: np.ndarray
    clusters: np.ndarray
    slack_upper: np.ndarray
    slack_lower: np.ndarray

    @property
    def xi_max(self) -> float:
        return float(self.xi.max())

    def upper(self) -> float:
        """xi_max widened by its Monte-Carlo slack."""
        return float(np.max(self.xi + self.slack_upper))


@dataclass(frozen=True)
class EventStats:
    counts: np.ndarray
    n: int
    rho_d: Dict[float, Optional[float]] = field(default_factory=dict)

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.n

    @property
    def p1(self) -> float:
        return float(self.counts[0] / self.n)

    @property
    def p2(self) -> float:
        return float(self.counts[1] / self.n)

    @property
    def p3(self) -> float:
        return float(self.counts[2] / self.n)

    @property
    def p4(self) -> float:
        return float(self.counts[3] / self.n)


@dataclass
class TheoryReport:
    measured: Dict[str, float] = field(default_factory=dict)
    events: Optional[EventStats] = None
    checks: List[BoundCheck] = field(default_factory=list)

    def add(self, check: BoundCheck) -> BoundCheck:
        self.checks.append(check)
        if check.failed:
            logger.warning(f"Check {check.name} failed: lhs={check.lhs:.6g} rhs={check.rhs:.6g}")
        elif not check.applicable:
            logger.warning(f"Check {check.name} not applicable: {check.context.get('reason')}")
        return check

    def failures(self) -> List[BoundCheck]:
        return [c for c in self.checks if c.failed]

    @property
    def passed(self) -> bool:
        return not self.failures()


# Measurements

def outlier_mask(world: World, data: SampleSet) -> np.ndarray:
    """Samples outside the closed kappa-cap of their class prototype."""
    centers = world.prototypes.columns[:, data.y - 1].T
    return np.linalg.norm(data.z - centers, axis=1) > world.config.kappa + BOUND_SLACK


def measure_world_stats(world: World, samples: SamplesLike) -> WorldStats:
    data = as_sample_set(samples)
    outside = outlier_mask(world, data)
    rho_hat = 0.0
    for c in range(1, world.classes + 1):
        mask = data.y == c
        if np.any(mask):
            rho_hat = max(rho_hat, float(np.count_nonzero(outside[mask]) / np.count_nonzero(mask)))
    return WorldStats(
        nu=measure_separation(world.prototypes),
        tau=measure_modality_gap(world.text, world.prototypes),
        rho_c_hat=rho_hat,
        kappa_used=world.config.kappa,
        outlier_fraction=float(np.count_nonzero(outside) / len(data)),
    )


def _cluster_mean(world: World, cluster_id: int, draws: int, rng: np.random.Generator) -> np.ndarray:
    cluster = world.clusters[cluster_id]
    total = np.zeros(world.dim)
    left = draws
    while left > 0:
        n = min(DRAW_CHUNK, left)
        centers = np.broadcast_to(cluster.center, (n, world.dim))
        total += sample_caps(centers, cluster.kappa, 0.0, rng).sum(axis=0)
        left -= n
    return total / draws


def measure_retrieval_shift(world: World, mode: Union[RetrievalMode, str],
                            draws: int = DEFAULT_DRAWS, seed: SeedLike = 0) -> RetrievalShift:
    """
    xi_c = 1 - kbar_c^T sbar_c for the cluster each class query resolves to.

    I2I queries are the one-shot samples, T2I queries the text embeddings.
    kbar is the normalized Monte-Carlo mean of the cluster, and each xi
    carries the standard error of that direction.
    """
    mode = RetrievalMode(mode)
    queries = world.one_shot if mode is RetrievalMode.I2I else world.text
    master = seed if isinstance(seed, int) else int(as_generator(seed).integers(0, 2**63 - 1))
    xi, se, clusters, up, low = [], [], [], [], []
    for c in range(1, world.classes + 1):
        cluster_id = nearest_cluster(world, queries.columns[:, c - 1])
        mean = _cluster_mean(world, cluster_id, draws, substream(master, f"shift-{mode.value}", c))
        norm = float(np.linalg.norm(mean))
        kbar = mean / norm if norm > ZERO_NORM else mean
        err = math.sqrt(max(1.0 - norm * norm, 0.0) / draws) / max(norm, ZERO_NORM)
        r = float(np.linalg.norm(kbar - world.prototypes.columns[:, c - 1]))
        xi.append(0.5 * r * r)
        se.append(err)
        clusters.append(cluster_id)
        up.append(0.5 * (r + 3 * err) ** 2 - 0.5 * r * r)
        low.append(0.5 * r * r - 0.5 * max(r - 3 * err, 0.0) ** 2)
    return RetrievalShift(mode, np.array(xi), np.array(se), np.array(clusters, dtype=np.int64),
                          np.array(up), np.array(low))


def phi_set(v, i: Union[ClassId, int], threshold: float) -> FrozenSet[int]:
    """{j : v_i - v_j <= threshold} as 1-based class ids."""
    scores = as_array(v)
    anchor = i.value if isinstance(i, ClassId) else int(i)
    members = frozenset(int(j) + 1 for j in np.flatnonzero(scores[anchor - 1] - scores <= threshold))
    if anchor not in members:
        warnings.warn(f"threshold {threshold} excludes class {anchor} from its own set",
                      NegativeThresholdWarning, stacklevel=2)
    return members


def shared_confusion(zoc: np.ndarray, ret: np.ndarray, y: np.ndarray, threshold: float) -> np.ndarray:
    """Per row: do both heads' phi sets share a class other than y."""
    if threshold < 0:
        # y drops out of both sets, so the intersection can never be {y}
        return np.ones(zoc.shape[0], dtype=bool)
    rows = np.arange(zoc.shape[0])
    idx = y - 1
    close_zoc = zoc[rows, idx][:, None] - zoc <= threshold
    close_ret = ret[rows, idx][:, None] - ret <= threshold
    both = close_zoc & close_ret
    both[rows, idx] = False
    return both.any(axis=1)


def classify_events(samples: SamplesLike, text: ClassAverages, kbar: ClassAverages,
                    thresholds: Iterable[float] = ()) -> EventStats:
    """
    Tag each sample by the joint correctness of the linear ZOC and RET heads.

    E1 both wrong, E2 only RET wrong, E3 only ZOC wrong, E4 both right.
    rho_d at each threshold is the shared-confusion rate over E2 and E3,
    None when that set is empty.
    """
    data = as_sample_set(samples)
    zoc = linear_scores(text, data.z)
    ret = linear_scores(kbar, data.z)
    zoc_ok = predict_batch(zoc) == data.y
    ret_ok = predict_batch(ret) == data.y
    tags = np.where(zoc_ok, np.where(ret_ok, 3, 1), np.where(ret_ok, 2, 0))
    counts = np.bincount(tags, minlength=4).astype(np.int64)

    single = tags == 1
    single |= tags == 2
    rho_d: Dict[float, Optional[float]] = {}
    for threshold in thresholds:
        if not np.any(single):
            rho_d[float(threshold)] = None
            continue
        shared = shared_confusion(zoc[single], ret[single], data.y[single], float(threshold))
        rho_d[float(threshold)] = float(np.count_nonzero(shared) / np.count_nonzero(single))
    return EventStats(counts, len(data), rho_d)


# Bounds

def soln_good_bound(classes: int, kappa: float, nu: float, rho: float) -> float:
    inlier = math.log1p((classes - 1) * math.exp(2 * kappa - nu))
    outlier = math.log1p((classes - 1) * math.exp(2.0))
    return (1.0 - rho) * inlier + rho * outlier


def bernstein_radius(kappa: float, shots: int, classes: int, delta: float) -> float:
    """kappa * sqrt(8 / K * log(C / delta))."""
    return kappa * math.sqrt(8.0 / shots * math.log(classes / delta))


def ensemble_threshold(kappa: float, nu: float, tau: float) -> float:
    return max(6 * kappa - nu, 2 * kappa + tau)


def _binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def check_lemma_soln_good(world: World, samples: SamplesLike) -> BoundCheck:
    """Risk of the prototype head against the concentration/separation bound."""
    data = as_sample_set(samples)
    stats = measure_world_stats(world, data)
    rho = max(world.config.rho_c, stats.rho_c_hat)
    rhs = soln_good_bound(world.classes, world.config.kappa, stats.nu, rho)
    lhs = empirical_risk(world.prototypes, data)
    return BoundCheck("lemma_soln_good", lhs, rhs, {
        "C": world.classes, "kappa": world.config.kappa, "nu": stats.nu, "rho": rho, "n": len(data),
    })


def assert_one_shot_concentration(world: World) -> None:
    gaps = np.linalg.norm(world.one_shot.columns - world.prototypes.columns, axis=0)
    if np.any(gaps > world.config.kappa + BOUND_SLACK):
        c = int(np.argmax(gaps)) + 1
        raise AssumptionViolated(
            f"one-shot sample of class {c} lies {gaps[c - 1]:.6g} from its prototype (kappa = {world.config.kappa})"
        )


def check_lemma_top_acc(world: World, samples: SamplesLike) -> BoundCheck:
    """
    Quantile of the one-shot head's logit gap max_{i != y} s_i^T z - s_y^T z
    against 4 kappa - nu.
    """
    assert_one_shot_concentration(world)
    data = as_sample_set(samples)
    scores = linear_scores(world.one_shot, data.z)
    rows = np.arange(len(data))
    own = scores[rows, data.y - 1]
    rivals = scores.copy()
    rivals[rows, data.y - 1] = -np.inf
    gaps = rivals.max(axis=1) - own

    stats = measure_world_stats(world, data)
    level = 1.0 - max(world.config.rho_c, stats.outlier_fraction)
    lhs = float(np.quantile(gaps, level, method="inverted_cdf"))
    rhs = 4 * world.config.kappa - stats.nu
    return BoundCheck("lemma_top_acc", lhs, rhs, {
        "kappa": world.config.kappa, "nu": stats.nu, "quantile_level": level, "n": len(data),
    })


def check_top_acc_corollary(world: World, samples: SamplesLike) -> BoundCheck:
    """With 4 kappa < nu the one-shot head is right on every inlier."""
    name = "top_acc_corollary"
    nu = measure_separation(world.prototypes)
    kappa, rho = world.config.kappa, world.config.rho_c
    if not 4 * kappa < nu:
        return BoundCheck.not_applicable(name, "needs 4*kappa < nu", kappa=kappa, nu=nu)
    data = as_sample_set(samples)
    acc = 1.0 - zero_one_risk(linear_head(world.one_shot), data)
    sigma = _binomial_sigma(rho, len(data))
    return BoundCheck(name, 1.0 - rho - 3 * sigma, acc, {
        "kappa": kappa, "nu": nu, "rho_c": rho, "sigma": sigma, "n": len(data),
    })


def check_lemma_uni(world: World, i2i: RetrievalShift, t2i: RetrievalShift) -> List[BoundCheck]:
    """
    Two checks: I2I shift stays within 2 kappa^2, and a text query resolving
    to a different cluster than the one-shot query costs at least nu - 2 kappa.
    """
    kappa = world.config.kappa
    nu = measure_separation(world.prototypes)
    checks = []

    own = np.arange(world.classes)
    if np.array_equal(i2i.clusters, own):
        worst = int(np.argmax(i2i.xi + i2i.slack_upper))
        checks.append(BoundCheck("lemma_uni_i2i", float(i2i.xi[worst]),
                                 2 * kappa ** 2 + float(i2i.slack_upper[worst]), {
                                     "kappa": kappa, "class": worst + 1, "stderr": float(i2i.stderr[worst]),
                                 }))
    else:
        checks.append(BoundCheck.not_applicable(
            "lemma_uni_i2i", "a one-shot query resolves outside its own cluster", kappa=kappa))

    differing = np.flatnonzero(t2i.clusters != i2i.clusters)
    if differing.size:
        worst = int(differing[np.argmin(t2i.xi[differing])])
        checks.append(BoundCheck("lemma_uni_t2i", nu - 2 * kappa - float(t2i.slack_lower[worst]),
                                 float(t2i.xi[worst]), {
                                     "kappa": kappa, "nu": nu, "class": worst + 1,
                                     "classes_differing": int(differing.size),
                                     "stderr": float(t2i.stderr[worst]),
                                 }))
    else:
        checks.append(BoundCheck.not_applicable(
            "lemma_uni_t2i", "text and one-shot queries resolve to the same clusters", kappa=kappa, nu=nu))
    return checks


def oracle_class_averages(world: World, queries: ClassAverages, shots: int, master_seed: int,
                          tag: str, trial: int) -> ClassAverages:
    """K-bar from K oracle draws per class."""
    rows = []
    for c in range(1, world.classes + 1):
        draws = oracle_retrieve(world, queries.columns[:, c - 1], shots,
                                substream(master_seed, tag, trial * world.classes + c))
        mean = draws.mean(axis=0)
        rows.append(mean / np.linalg.norm(mean))
    return ClassAverages.from_rows(np.stack(rows))


def check_theorem_uni(world: World, samples: SamplesLike, alpha: float, gamma: float, shots: int,
                      delta: float, mode: Union[RetrievalMode, str], shift: RetrievalShift,
                      trials: int = 200, seed: int = 0) -> BoundCheck:
    """
    Excess risk of alpha T + gamma Kbar (+ residual weight on S-bar) over S-bar,
    against the modality, concentration and shift terms; passes when the bound
    is violated in at most a delta fraction of trials.
    """
    if alpha + gamma > 1.0 + 1e-12:
        raise WeightSumViolation(f"alpha + gamma = {alpha + gamma!r} exceeds 1")
    mode = RetrievalMode(mode)
    data = as_sample_set(samples)
    kappa, classes = world.config.kappa, world.classes
    sbar = world.prototypes.columns
    queries = world.one_shot if mode is RetrievalMode.I2I else world.text

    modality = np.linalg.norm(data.z @ (world.text.columns - sbar), axis=1)
    xi = shift.upper()
    bound = LIPSCHITZ_CE * (
        alpha * float(modality.max())
        + gamma * bernstein_radius(kappa, shots, classes, delta) * math.sqrt(classes)
        + gamma * math.sqrt(2 * classes * xi)
    )
    base = empirical_risk(sbar, data)
    residual = 1.0 - alpha - gamma
    excess = np.empty(trials)
    for trial in range(trials):
        kbar = oracle_class_averages(world, queries, shots, seed, f"theorem-uni-{mode.value}", trial)
        q = alpha * world.text.columns + gamma * kbar.columns + residual * sbar
        excess[trial] = empirical_risk(q, data) - base
    violated = float(np.count_nonzero(excess > bound + BOUND_SLACK) / trials)
    return BoundCheck(f"theorem_uni_{mode.value}_K{shots}", violated, delta, {
        "mode": mode.value, "K": shots, "alpha": alpha, "gamma": gamma, "delta": delta,
        "trials": trials, "bound": bound, "xi": xi, "modality_max": float(modality.max()),
        "modality_mean": float(modality.mean()), "excess_mean": float(excess.mean()),
        "excess_max": float(excess.max()), "note": INTERPRETATION_NOTE,
    })


def check_theorem_ensemble(world: World, samples: SamplesLike, shots: int,
                           seed: int = 0) -> List[BoundCheck]:
    """
    Zero-one risk of the half/half linear ensemble against
    Pr(E1) + (Pr(E2) + Pr(E3)) rho_d(z*) + rho, plus the corollary comparing
    ensemble and zero-shot accuracy.
    """
    data = as_sample_set(samples)
    stats = measure_world_stats(world, data)
    rho = max(world.config.rho_c, stats.rho_c_hat)
    z_star = ensemble_threshold(world.config.kappa, stats.nu, stats.tau)
    kbar = oracle_class_averages(world, world.one_shot, shots, seed, "theorem-ensemble", 0)
    events = classify_events(data, world.text, kbar, [z_star])
    rho_d = events.rho_d[z_star]

    ensemble = 0.5 * world.text.columns + 0.5 * kbar.columns
    ens_risk = zero_one_risk(linear_head(ensemble), data)
    single = events.p2 + events.p3
    rhs = events.p1 + rho + (single * rho_d if rho_d is not None else 0.0)
    context = {
        "p1": events.p1, "p2": events.p2, "p3": events.p3, "p4": events.p4,
        "rho": rho, "z_star": z_star, "rho_d": "absent" if rho_d is None else rho_d, "K": shots,
    }
    checks = [BoundCheck("theorem_ensemble", ens_risk, rhs, context)]
    checks.append(check_ensemble_corollary(events, rho, rho_d, ens_risk))
    return checks


def check_ensemble_corollary(events: EventStats, rho: float, rho_d: Optional[float],
                             ensemble_risk: float) -> BoundCheck:
    name = "ensemble_corollary"
    if rho_d is None:
        return BoundCheck.not_applicable(name, "no sample with exactly one head wrong")
    margin = (events.p2 + events.p3) * (1.0 - rho_d) - rho
    if margin < max(events.p2, events.p3):
        return BoundCheck.not_applicable(name, "ensemble advantage condition is false", margin=margin)
    zoc_acc = 1.0 - (events.p1 + events.p3)
    return BoundCheck(name, zoc_acc, 1.0 - ensemble_risk, {"margin": margin, "rho_d": rho_d, "rho": rho})


def check_lipschitz(classes_list: Sequence[int], trials_per_class: int, seed: SeedLike = 0,
                    chunk: int = 10_000) -> BoundCheck:
    """Largest cross-entropy gradient norm over random logits in [-1, 1]^C."""
    rng = as_generator(seed)
    worst = 0.0
    for classes in classes_list:
        left = trials_per_class
        while left > 0:
            n = min(chunk, left)
            v = rng.uniform(-1.0, 1.0, size=(n, classes))
            y = rng.integers(1, classes + 1, size=n)
            norms = gradient_norms(v, y)
            worst = max(worst, float(norms.max()))
            left -= n
    return BoundCheck("lipschitz", worst, LIPSCHITZ_CE, {
        "classes": "/".join(str(c) for c in classes_list), "trials": trials_per_class,
    })


def check_bernstein(world: World, shots: int, delta: float, trials: int, seed: int = 0) -> BoundCheck:
    """
    Fraction of trials in which some class's normalized K-sample mean strays
    from the cluster centre by more than the vector Bernstein radius.
    """
    if shots < 1 or not 0.0 < delta < 1.0:
        raise ValueError("need K >= 1 and 0 < delta < 1")
    classes, kappa = world.classes, world.config.kappa
    radius = bernstein_radius(kappa, shots, classes, delta)
    exceed = 0
    worst = 0.0
    for trial in range(trials):
        kbar = oracle_class_averages(world, world.prototypes, shots, seed, "bernstein", trial)
        dev = float(np.max(np.linalg.norm(kbar.columns - world.prototypes.columns, axis=0)))
        worst = max(worst, dev)
        exceed += dev > radius
    sigma = _binomial_sigma(delta, trials)
    return BoundCheck(f"bernstein_K{shots}", exceed / trials, delta + 3 * sigma, {
        "K": shots, "C": classes, "kappa": kappa, "delta": delta, "radius": radius,
        "trials": trials, "max_deviation": worst,
    })


def check_toy_risk() -> BoundCheck:
    """Two antipodal points on the circle: the prototype risk meets its bound exactly."""
    sbar = np.array([[1.0, -1.0], [0.0, 0.0]])
    data = SampleSet(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, 2]))
    lhs = empirical_risk(sbar, data)
    return BoundCheck("toy_risk", lhs, soln_good_bound(2, 0.0, 2.0, 0.0), {"expected": math.log1p(math.exp(-2.0))})


# Reports

REPORT_FIELDS = ["world", "name", "lhs", "rhs", "satisfied", "applicable", "context"]


def write_report_csv(path: Union[str, Path], labeled: Sequence[Tuple[str, BoundCheck]]) -> None:
    """One row per check, prefixed by the label of the world it ran on."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for label, check in labeled:
            writer.writerow({"world": label, **check.as_row()})
