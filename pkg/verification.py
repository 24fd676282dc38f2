"""
Verification Module
Runs every theory check over a sweep of generated worlds and writes the reports
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import List, Tuple, Union

from experiment_config import ExperimentConfig, TheoryConfig
from experiment_runner import RunDirectory, manifest_text
from messages import Messages
from retrieval_engine import RetrievalMode
from rng_streams import child_seed, substream
from synthetic_world import TauMode, WorldConfig, make_world, sample_target_set
from theory_lab import (
    BoundCheck,
    TheoryReport,
    check_bernstein,
    check_lemma_soln_good,
    check_lemma_top_acc,
    check_lemma_uni,
    check_lipschitz,
    check_theorem_ensemble,
    check_theorem_uni,
    check_top_acc_corollary,
    check_toy_risk,
    classify_events,
    ensemble_threshold,
    measure_retrieval_shift,
    measure_world_stats,
    oracle_class_averages,
    write_report_csv,
)

logger = logging.getLogger(__name__)

GLOBAL_LABEL = "global"


@dataclass
class VerificationResult:
    reports: List[Tuple[str, TheoryReport]] = field(default_factory=list)

    def labeled_checks(self) -> List[Tuple[str, BoundCheck]]:
        return [(label, check) for label, report in self.reports for check in report.checks]

    def failures(self) -> List[Tuple[str, BoundCheck]]:
        return [(label, check) for label, check in self.labeled_checks() if check.failed]

    @property
    def passed(self) -> bool:
        return not self.failures()


def theory_worlds(config: ExperimentConfig) -> List[Tuple[str, WorldConfig]]:
    """Grid over kappa x nu x rho_c, `worlds` seeds each, all with adversarial text."""
    theory = config.theory
    base = config.world
    worlds = []
    grid = itertools.product(theory.kappas, theory.nus, theory.rho_cs, range(theory.worlds))
    for index, (kappa, nu, rho, repeat) in enumerate(grid):
        world_seed = child_seed(substream(config.master_seed, "verify-world", index))
        label = f"w{index}:k={kappa:g},nu={nu:g},rho={rho:g},r={repeat}"
        worlds.append((label, replace(
            base, kappa=kappa, nu_target=nu, rho_c=rho, tau_mode=TauMode.ADVERSARIAL,
            adversarial_fraction=theory.adversarial_fraction,
            clusters_per_class=max(base.clusters_per_class, 2), master_seed=world_seed,
        )))
    return worlds


def rhs_order_check(shots: int, i2i: BoundCheck, t2i: BoundCheck, adversarial: bool) -> BoundCheck:
    name = f"theorem_uni_rhs_order_K{shots}"
    if not adversarial:
        return BoundCheck.not_applicable(name, "text queries share the one-shot clusters")
    i2i_bound, t2i_bound = float(i2i.context["bound"]), float(t2i.context["bound"])
    # strict: leave room for the comparison slack
    return BoundCheck(name, i2i_bound, t2i_bound - 2e-9, {"K": shots, "t2i_bound": t2i_bound})


def verify_world(world_config: WorldConfig, theory: TheoryConfig, seed: int) -> TheoryReport:
    world = make_world(world_config)
    samples = sample_target_set(world, theory.samples, substream(seed, "verify-samples"))
    stats = measure_world_stats(world, samples)
    i2i = measure_retrieval_shift(world, RetrievalMode.I2I, theory.draws, seed)
    t2i = measure_retrieval_shift(world, RetrievalMode.T2I, theory.draws, seed)

    report = TheoryReport(measured={
        "nu": stats.nu, "tau": stats.tau, "rho_c_hat": stats.rho_c_hat, "kappa": stats.kappa_used,
        "kappa_cosine": stats.kappa_cosine, "xi_i2i": i2i.xi_max, "xi_t2i": t2i.xi_max,
    })
    report.add(check_lemma_soln_good(world, samples))
    report.add(check_lemma_top_acc(world, samples))
    report.add(check_top_acc_corollary(world, samples))
    for check in check_lemma_uni(world, i2i, t2i):
        report.add(check)

    adversarial = bool((t2i.clusters != i2i.clusters).any())
    for shots in theory.shots:
        by_mode = {}
        for mode, shift in ((RetrievalMode.I2I, i2i), (RetrievalMode.T2I, t2i)):
            by_mode[mode] = report.add(check_theorem_uni(
                world, samples, theory.alpha, theory.gamma, shots, theory.delta, mode, shift,
                trials=theory.trials, seed=seed,
            ))
        report.add(rhs_order_check(shots, by_mode[RetrievalMode.I2I], by_mode[RetrievalMode.T2I], adversarial))
        report.add(check_bernstein(world, shots, theory.delta, theory.bernstein_trials, seed=seed))

    ensemble_shots = max(theory.shots)
    for check in check_theorem_ensemble(world, samples, ensemble_shots, seed=seed):
        report.add(check)
    kbar = oracle_class_averages(world, world.one_shot, ensemble_shots, seed, "theorem-ensemble", 0)
    report.events = classify_events(samples, world.text, kbar,
                                    [ensemble_threshold(world.config.kappa, stats.nu, stats.tau)])
    return report


def _verify_indexed(config: ExperimentConfig, item: Tuple[int, Tuple[str, WorldConfig]]) -> Tuple[str, TheoryReport]:
    index, (label, world_config) = item
    seed = child_seed(substream(config.master_seed, "verify-checks", index))
    report = verify_world(world_config, config.theory, seed)
    logger.info(f"Verified {label}: {len(report.failures())} failure(s)")
    return label, report


def run_verification(config: ExperimentConfig) -> VerificationResult:
    theory = config.theory
    overall = TheoryReport()
    overall.add(check_toy_risk())
    overall.add(check_lipschitz(theory.lipschitz_classes, theory.lipschitz_trials,
                                substream(config.master_seed, "lipschitz")))
    result = VerificationResult([(GLOBAL_LABEL, overall)])

    items = list(enumerate(theory_worlds(config)))
    worker = partial(_verify_indexed, config)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            result.reports.extend(pool.map(worker, items))
    else:
        result.reports.extend(worker(item) for item in items)
    return result


def report_text(result: VerificationResult, language: str = "en") -> str:
    messages = Messages()
    blocks = []
    for label, report in result.reports:
        blocks.append(f"## {label}\n" + messages.get_report_text(report, language=language))
    return "\n\n".join(blocks) + "\n"


def write_verification(result: VerificationResult, config: ExperimentConfig,
                       target: Union[str, Path]) -> Path:
    labeled = result.labeled_checks()
    with RunDirectory(target) as out:
        write_report_csv(out / "theory_report.csv", labeled)
        (out / "theory_report.txt").write_text(report_text(result, config.logging.language), encoding="utf-8")
        counts = {"checks": len(labeled), "failed": len(result.failures()), "worlds": len(result.reports) - 1}
        (out / "manifest.txt").write_text(manifest_text(config, counts), encoding="utf-8")
    logger.info(f"Verification written to {target}")
    return Path(target)
