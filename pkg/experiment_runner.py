"""
Experiment Runner Module
Sweeps trials x shots x retrieval modes x heads x weight grid and writes
plot-ready CSV results
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from adaptation_engine import (
    EnsembleWeights,
    SampleSet,
    cache_training_set,
    classwise_accuracy,
    ensemble_head,
    finetune_cache,
    mixture_cache,
    predict_batch,
    ret_head,
    risk_of_scores,
    tune_ensemble,
    weights_from_ratio,
    zoc_head,
)
from errors import RunDirectoryExists
from experiment_config import ExperimentConfig
from retrieval_engine import Cache, QuerySet, build_cache, cache_from_rows, oracle_retrieve
from rng_streams import child_seed, substream
from synthetic_world import World, make_world, sample_caps, sample_target_set

logger = logging.getLogger(__name__)

RESULT_FIELDS = ["trial", "K", "retrieval_mode", "head", "alpha", "gamma", "omega", "accuracy", "ce_risk"]
SUMMARY_FIELDS = ["K", "retrieval_mode", "head", "alpha", "gamma", "omega", "trials",
                  "accuracy_mean", "accuracy_std", "ce_risk_mean", "ce_risk_std"]
CLASSWISE_FIELDS = ["trial", "K", "retrieval_mode", "head", "class", "accuracy"]


def fmt_float(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class ResultRow:
    trial: int
    shots: int
    retrieval_mode: str
    head: str
    alpha: float
    gamma: float
    omega: float
    accuracy: float
    ce_risk: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy!r} outside [0, 1]")
        if not self.ce_risk >= 0.0:
            raise ValueError(f"ce_risk {self.ce_risk!r} is negative")

    def as_row(self) -> List[str]:
        return [str(self.trial), str(self.shots), self.retrieval_mode, self.head,
                fmt_float(self.alpha), fmt_float(self.gamma), fmt_float(self.omega),
                fmt_float(self.accuracy), fmt_float(self.ce_risk)]


@dataclass(frozen=True)
class ClasswiseRow:
    trial: int
    shots: int
    retrieval_mode: str
    head: str
    class_id: int
    accuracy: float

    def as_row(self) -> List[str]:
        return [str(self.trial), str(self.shots), self.retrieval_mode, self.head,
                str(self.class_id), fmt_float(self.accuracy)]


@dataclass
class TrialOutcome:
    rows: List[ResultRow] = field(default_factory=list)
    classwise: List[ClasswiseRow] = field(default_factory=list)


@dataclass
class RunResult:
    rows: List[ResultRow]
    classwise: List[ClasswiseRow]
    summary: List[Dict[str, str]]
    output: Optional[Path] = None


# Cache construction per retrieval arm

def seed_queries(world: World, seeds: int, extra_pool: np.ndarray) -> QuerySet:
    """The one-shot sample plus seeds - 1 extra in-distribution inliers per class."""
    per_class = []
    for c in range(1, world.classes + 1):
        rows = [world.one_shot.columns[:, c - 1][None, :]]
        if seeds > 1:
            rows.append(extra_pool[c - 1, :seeds - 1])
        per_class.append(np.concatenate(rows))
    return QuerySet.seeds(per_class)


def build_mode_caches(config: ExperimentConfig, world: World, trial: int, shots: int) -> "OrderedDict[str, Cache]":
    seed, classes = config.master_seed, world.classes
    caches: "OrderedDict[str, Cache]" = OrderedDict()
    for mode in config.modes:
        if mode == "T2I":
            caches["T2I"] = build_cache(world.database, QuerySet.text(world.text), shots)
        elif mode == "I2I":
            most = max(config.seeds_per_class)
            pool = np.stack([
                sample_caps(np.repeat(world.prototypes.columns[:, c - 1][None, :], max(most - 1, 1), axis=0),
                            world.config.kappa, 0.0, substream(seed, "seeds", trial * classes + c))
                for c in range(1, classes + 1)
            ])
            for label, n in config.i2i_labels():
                caches[label] = build_cache(world.database, seed_queries(world, n, pool), shots)
        elif mode == "ORACLE":
            rows = [
                oracle_retrieve(world, world.prototypes.columns[:, c - 1], shots,
                                substream(seed, f"oracle-K{shots}", trial * classes + c))
                for c in range(1, classes + 1)
            ]
            caches["ORACLE"] = cache_from_rows(rows)
    return caches


def id_cache(config: ExperimentConfig, world: World, trial: int, shots: int) -> Cache:
    """K target-distribution samples per class."""
    rows = [
        sample_caps(np.repeat(world.prototypes.columns[:, c - 1][None, :], shots, axis=0),
                    world.config.kappa, world.config.rho_c,
                    substream(config.master_seed, f"id-K{shots}", trial * world.classes + c))
        for c in range(1, world.classes + 1)
    ]
    return cache_from_rows(rows)


# Evaluation

def _evaluate(predictor, data: SampleSet) -> Tuple[float, float]:
    scores = predictor(data.z)
    accuracy = float(np.count_nonzero(predict_batch(scores) == data.y)) / len(data)
    return accuracy, risk_of_scores(scores, data.y)


def run_trial(config: ExperimentConfig, trial: int) -> TrialOutcome:
    """One world, one test set and one validation set; every K, arm and head."""
    seed = config.master_seed
    world = make_world(replace(config.world, master_seed=child_seed(substream(seed, "world", trial))))
    test = sample_target_set(world, config.test_size, substream(seed, "test", trial))
    val = sample_target_set(world, config.val_size, substream(seed, "val", trial))
    heads = set(config.heads)
    outcome = TrialOutcome()

    def emit(shots, label, head, alpha, gamma, omega, predictor):
        accuracy, risk = _evaluate(predictor, test)
        outcome.rows.append(ResultRow(trial, shots, label, head, alpha, gamma, omega, accuracy, risk))

    def emit_classwise(shots, label, head, predictor):
        for c, acc in enumerate(classwise_accuracy(predictor, test, world.classes), start=1):
            outcome.classwise.append(ClasswiseRow(trial, shots, label, head, c, float(acc)))

    for shots in config.shots:
        caches = build_mode_caches(config, world, trial, shots)
        mixed_base = id_cache(config, world, trial, shots) if "MIX" in heads else None
        for label, base in caches.items():
            for omega in config.omegas:
                cache = replace(base, omega=omega)
                if "ZOC" in heads:
                    emit(shots, label, "ZOC", 1.0, 0.0, omega, zoc_head(world.text))
                if "RET" in heads:
                    emit(shots, label, "RET", 0.0, 1.0, omega, ret_head(cache))
                for ratio in config.ratios:
                    alpha, gamma = weights_from_ratio(ratio)
                    if "EN" in heads:
                        emit(shots, label, "EN", alpha, gamma, omega, ensemble_head(world.text, cache, alpha, gamma))
                    if "EN_F" in heads:
                        tuned = finetune_cache(cache, cache_training_set(cache), world.text,
                                               EnsembleWeights(alpha, gamma), config.finetune)
                        emit(shots, label, "EN_F", alpha, gamma, omega, ensemble_head(world.text, tuned, alpha, gamma))
                    if "MIX" in heads:
                        mixed = mixture_cache(replace(mixed_base, omega=omega), cache)
                        emit(shots, label, "MIX", alpha, gamma, omega, ensemble_head(world.text, mixed, alpha, gamma))

            if "ZOC" in heads:
                emit_classwise(shots, label, "ZOC", zoc_head(world.text))
            if "RET" in heads:
                emit_classwise(shots, label, "RET", ret_head(replace(base, omega=config.omegas[0])))
            if "EN_TUNED" in heads:
                best = tune_ensemble(world.text, base, val, config.ratios, config.omegas)
                predictor = ensemble_head(world.text, replace(base, omega=best.omega), best.alpha, best.gamma)
                emit(shots, label, "EN_TUNED", best.alpha, best.gamma, best.omega, predictor)
                emit_classwise(shots, label, "EN_TUNED", predictor)

    logger.info(f"Trial {trial} done: {len(outcome.rows)} rows")
    return outcome


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Run every trial; results are gathered in trial order whatever the thread count."""
    worker = partial(run_trial, config)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(worker, range(config.trials)))
    else:
        outcomes = [worker(t) for t in range(config.trials)]
    rows = [row for o in outcomes for row in o.rows]
    classwise = [row for o in outcomes for row in o.classwise]
    return RunResult(rows, classwise, summarize(rows))


# Summaries

def _std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else float("nan")


def summarize(rows: Sequence[ResultRow]) -> List[Dict[str, str]]:
    """Mean and sample std over trials per (K, mode, head, alpha, gamma, omega), in first-seen order."""
    groups: "OrderedDict[tuple, List[ResultRow]]" = OrderedDict()
    for row in rows:
        key = (row.shots, row.retrieval_mode, row.head, row.alpha, row.gamma, row.omega)
        groups.setdefault(key, []).append(row)
    summary = []
    for (shots, mode, head, alpha, gamma, omega), members in groups.items():
        acc = np.array([m.accuracy for m in members])
        risk = np.array([m.ce_risk for m in members])
        summary.append({
            "K": str(shots), "retrieval_mode": mode, "head": head,
            "alpha": fmt_float(alpha), "gamma": fmt_float(gamma), "omega": fmt_float(omega),
            "trials": str(len(members)),
            "accuracy_mean": fmt_float(acc.mean()), "accuracy_std": fmt_float(_std(acc)),
            "ce_risk_mean": fmt_float(risk.mean()), "ce_risk_std": fmt_float(_std(risk)),
        })
    return summary


def best_accuracy(summary: Sequence[Dict[str, str]], shots: int, mode: str, head: str) -> Optional[float]:
    """Best mean accuracy over the weight grid for one (K, mode, head)."""
    means = [float(r["accuracy_mean"]) for r in summary
             if int(r["K"]) == shots and r["retrieval_mode"] == mode and r["head"] == head]
    return max(means) if means else None


def accuracy_orderings(summary: Sequence[Dict[str, str]]) -> List[Tuple[int, str, bool]]:
    """The retrieval-arm and head orderings per K, for the modes present."""
    results = []
    for shots in sorted({int(r["K"]) for r in summary}):
        modes = sorted({r["retrieval_mode"] for r in summary if int(r["K"]) == shots})
        oracle = best_accuracy(summary, shots, "ORACLE", "EN")
        t2i = best_accuracy(summary, shots, "T2I", "EN")
        # I2I, or one I2I@n label per seed count
        for label in (m for m in modes if m.split("@")[0] == "I2I"):
            i2i = best_accuracy(summary, shots, label, "EN")
            if oracle is not None and i2i is not None:
                results.append((shots, f"ORACLE-EN >= {label}-EN", oracle >= i2i))
            if i2i is not None and t2i is not None:
                results.append((shots, f"{label}-EN > T2I-EN", i2i > t2i))
        for mode in modes:
            en = best_accuracy(summary, shots, mode, "EN")
            others = [best_accuracy(summary, shots, mode, h) for h in ("ZOC", "RET")]
            others = [v for v in others if v is not None]
            if en is not None and others:
                results.append((shots, f"{mode}: EN > max(ZOC, RET)", en > max(others)))
    return results


# Output

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_summary(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def manifest_text(config: ExperimentConfig, counts: Dict[str, int]) -> str:
    """Config echo and file counts; no timestamps so reruns stay byte-identical."""
    lines = [f"{name} = {value}" for name, value in counts.items()]
    echo = asdict(config)
    # thread count and destination do not change results
    echo.pop("threads")
    echo.pop("output")
    lines.append("config = " + json.dumps(echo, sort_keys=True, default=str))
    return "\n".join(lines) + "\n"


class RunDirectory:
    """Write into a sibling temp directory, then rename it into place."""

    def __init__(self, target: Union[str, Path]):
        self.target = Path(target)
        if self.target.exists():
            raise RunDirectoryExists(f"{self.target} already exists")
        self.temp = self.target.parent / f".{self.target.name}.tmp-{os.getpid()}"

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        if self.temp.exists():
            shutil.rmtree(self.temp)
        self.temp.mkdir()
        return self.temp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.temp, ignore_errors=True)
            return False
        if self.target.exists():
            shutil.rmtree(self.temp, ignore_errors=True)
            raise RunDirectoryExists(f"{self.target} appeared while the run was writing")
        os.rename(self.temp, self.target)
        return False


def write_run(result: RunResult, config: ExperimentConfig, target: Union[str, Path]) -> Path:
    with RunDirectory(target) as out:
        _write_csv(out / "results.csv", RESULT_FIELDS, [r.as_row() for r in result.rows])
        _write_csv(out / "summary.csv", SUMMARY_FIELDS,
                   [[row[k] for k in SUMMARY_FIELDS] for row in result.summary])
        _write_csv(out / "classwise.csv", CLASSWISE_FIELDS, [r.as_row() for r in result.classwise])
        counts = {"results": len(result.rows), "summary": len(result.summary), "classwise": len(result.classwise)}
        (out / "manifest.txt").write_text(manifest_text(config, counts), encoding="utf-8")
    result.output = Path(target)
    logger.info(f"Run written to {target}")
    return result.output
