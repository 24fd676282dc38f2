import csv
import math
import warnings

import numpy as np
import pytest

from adaptation_engine import SampleSet, linear_head, zero_one_risk
from errors import AssumptionViolated, NegativeThresholdWarning, WeightSumViolation
from retrieval_engine import ClassAverages, RetrievalMode
from synthetic_world import TauMode, WorldConfig, make_world, sample_target_set
from theory_lab import (
    BoundCheck,
    TheoryReport,
    assert_one_shot_concentration,
    bernstein_radius,
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
    phi_set,
    soln_good_bound,
    write_report_csv,
)


@pytest.fixture
def samples(small_world):
    return sample_target_set(small_world, 400, 1)


class TestBoundCheck:
    def test_satisfied_within_slack(self):
        assert BoundCheck("x", 1.0 + 5e-10, 1.0).satisfied
        assert not BoundCheck("x", 1.0 + 1e-8, 1.0).satisfied

    def test_not_applicable_never_fails(self):
        check = BoundCheck.not_applicable("x", "condition is false")
        assert not check.failed and not check.applicable
        assert check.context["reason"] == "condition is false"

    def test_row_format(self):
        row = BoundCheck("x", 0.1, 0.25, {"K": 4, "kappa": 0.3}).as_row()
        assert row["lhs"] == format(0.1, ".17g")
        assert row["context"] == "K=4;kappa=0.29999999999999999"
        assert row["satisfied"] == "true"

    def test_report_collects_failures(self):
        report = TheoryReport()
        report.add(BoundCheck("ok", 0.0, 1.0))
        report.add(BoundCheck("bad", 2.0, 1.0))
        report.add(BoundCheck.not_applicable("skipped", "n/a"))
        assert [c.name for c in report.failures()] == ["bad"]
        assert not report.passed


class TestClosedForms:
    def test_bernstein_radius(self):
        assert bernstein_radius(0.3, 16, 10, 0.05) == pytest.approx(0.48829, abs=1e-5)

    def test_soln_good_bound(self):
        expected = 0.9 * math.log1p(4 * math.exp(0.4 - 1.0)) + 0.1 * math.log1p(4 * math.exp(2.0))
        assert soln_good_bound(5, 0.2, 1.0, 0.1) == pytest.approx(expected, abs=1e-15)

    def test_ensemble_threshold(self):
        assert ensemble_threshold(0.1, 0.8, -0.8) == pytest.approx(-0.2)
        assert ensemble_threshold(0.1, 0.8, 0.3) == pytest.approx(0.5)


class TestToyRisk:
    def test_exact_value(self):
        check = check_toy_risk()
        assert check.lhs == pytest.approx(0.1269280110, abs=1e-9)
        assert check.satisfied


class TestLipschitz:
    def test_bound_holds(self):
        check = check_lipschitz((2, 10, 100), 10_000, seed=0)
        assert check.rhs == pytest.approx(2.89638673, abs=1e-8)
        assert check.lhs <= check.rhs + 1e-9
        assert check.lhs > 0.7


class TestPhiSet:
    def test_members(self):
        assert phi_set([0.5, 0.4, 0.1], 1, 0.15) == frozenset({1, 2})

    def test_zero_threshold_keeps_anchor(self):
        assert phi_set([0.5, 0.4, 0.1], 1, 0.0) == frozenset({1})

    def test_negative_threshold_warns(self):
        with pytest.warns(NegativeThresholdWarning):
            result = phi_set([0.5, 0.4, 0.1], 1, -0.05)
        assert 1 not in result


class TestClassifyEvents:
    def test_counts(self):
        text = ClassAverages(np.eye(3))
        kbar = ClassAverages(np.eye(3)[:, [1, 0, 2]])
        z = np.eye(3)[[0, 1, 2, 0, 2]]
        y = np.array([1, 2, 3, 2, 1])
        events = classify_events(SampleSet(z, y), text, kbar, [0.5])
        np.testing.assert_array_equal(events.counts, [1, 2, 1, 1])
        assert events.p1 + events.p2 + events.p3 + events.p4 == pytest.approx(1.0)
        assert events.rho_d[0.5] is not None

    @pytest.mark.parametrize("changes", [
        {},
        {"tau_mode": "adversarial", "adversarial_fraction": 0.5, "rho_c": 0.2},
        {"tau_mode": "adversarial", "rho_c": 0.1},
    ])
    def test_risks_from_event_counts(self, small_config, changes):
        world = make_world(small_config.with_overrides(**changes))
        data = sample_target_set(world, 600, 3)
        kbar = oracle_class_averages(world, world.one_shot, 4, 3, "events", 0)
        events = classify_events(data, world.text, kbar)
        n = len(data)
        zoc_wrong = round(zero_one_risk(linear_head(world.text), data) * n)
        ret_wrong = round(zero_one_risk(linear_head(kbar), data) * n)
        assert zoc_wrong == events.counts[0] + events.counts[2]
        assert ret_wrong == events.counts[0] + events.counts[1]
        assert zero_one_risk(linear_head(world.text), data) == pytest.approx(events.p1 + events.p3, abs=1e-15)
        assert zero_one_risk(linear_head(kbar), data) == pytest.approx(events.p1 + events.p2, abs=1e-15)
        assert events.counts.sum() == n

    def test_absent_single_errors(self):
        text = ClassAverages(np.eye(2))
        events = classify_events(SampleSet(np.eye(2), [1, 2]), text, text, [0.1])
        assert events.p4 == 1.0
        assert events.rho_d[0.1] is None


class TestWorldMeasurements:
    def test_stats(self, small_world, samples):
        stats = measure_world_stats(small_world, samples)
        assert stats.rho_c_hat == 0.0
        assert stats.nu == pytest.approx(0.8, abs=1e-9)
        assert stats.kappa_cosine == pytest.approx(1.0 - 0.1 ** 2 / 2)

    def test_outlier_fraction_tracks_rho(self, small_config):
        world = make_world(small_config.with_overrides(rho_c=0.2))
        stats = measure_world_stats(world, sample_target_set(world, 4000, 5))
        assert stats.outlier_fraction == pytest.approx(0.2, abs=0.03)
        assert stats.rho_c_hat >= stats.outlier_fraction - 1e-12

    def test_i2i_shift_is_small(self, small_world):
        shift = measure_retrieval_shift(small_world, RetrievalMode.I2I, draws=20_000, seed=1)
        np.testing.assert_array_equal(shift.clusters, np.arange(small_world.classes))
        assert shift.xi_max <= 2 * small_world.config.kappa ** 2

    def test_t2i_shift_on_adversarial_text(self, adversarial_world):
        shift = measure_retrieval_shift(adversarial_world, "T2I", draws=20_000, seed=1)
        assert np.all(shift.clusters >= adversarial_world.classes)
        assert shift.xi.min() >= adversarial_world.nu - 2 * adversarial_world.config.kappa - 1e-3


class TestLemmas:
    def test_soln_good(self, small_world, samples):
        assert check_lemma_soln_good(small_world, samples).satisfied

    def test_soln_good_with_outliers(self, small_config):
        world = make_world(small_config.with_overrides(rho_c=0.1))
        assert check_lemma_soln_good(world, sample_target_set(world, 1000, 2)).satisfied

    def test_top_acc(self, small_world, samples):
        check = check_lemma_top_acc(small_world, samples)
        assert check.satisfied
        assert check.rhs == pytest.approx(0.4 - 0.8, abs=1e-9)

    def test_top_acc_corollary(self, small_world, samples):
        check = check_top_acc_corollary(small_world, samples)
        assert check.applicable and check.satisfied
        assert check.rhs == 1.0

    def test_top_acc_corollary_not_applicable(self):
        world = make_world(WorldConfig(classes=3, dim=6, kappa=0.3, nu_target=0.9, db_per_cluster=4))
        check = check_top_acc_corollary(world, sample_target_set(world, 100, 0))
        assert not check.applicable

    def test_one_shot_assumption(self, small_world):
        far = type(small_world)(**{**small_world.__dict__, "one_shot": ClassAverages(-small_world.prototypes.columns)})
        with pytest.raises(AssumptionViolated):
            assert_one_shot_concentration(far)

    def test_uni_on_adversarial_world(self, adversarial_world):
        i2i = measure_retrieval_shift(adversarial_world, RetrievalMode.I2I, draws=20_000, seed=2)
        t2i = measure_retrieval_shift(adversarial_world, RetrievalMode.T2I, draws=20_000, seed=2)
        first, second = check_lemma_uni(adversarial_world, i2i, t2i)
        assert first.name == "lemma_uni_i2i" and first.satisfied
        assert second.name == "lemma_uni_t2i" and second.applicable and second.satisfied

    def test_uni_t2i_not_applicable_for_mirror_text(self, small_world):
        i2i = measure_retrieval_shift(small_world, RetrievalMode.I2I, draws=5_000, seed=2)
        t2i = measure_retrieval_shift(small_world, RetrievalMode.T2I, draws=5_000, seed=2)
        assert not check_lemma_uni(small_world, i2i, t2i)[1].applicable

    @pytest.mark.slow
    @pytest.mark.parametrize("kappa", [0.05, 0.1])
    @pytest.mark.parametrize("nu", [0.6, 1.0])
    def test_uni_across_worlds(self, kappa, nu):
        for seed in range(25):
            world = make_world(WorldConfig(classes=3, dim=8, kappa=kappa, nu_target=nu, clusters_per_class=2,
                                           db_per_cluster=4, tau_mode=TauMode.ADVERSARIAL, master_seed=seed))
            i2i = measure_retrieval_shift(world, RetrievalMode.I2I, draws=2_000, seed=seed)
            t2i = measure_retrieval_shift(world, RetrievalMode.T2I, draws=2_000, seed=seed)
            first, second = check_lemma_uni(world, i2i, t2i)
            assert not first.failed, f"seed={seed}"
            assert second.applicable and second.satisfied, f"seed={seed}"

    @pytest.mark.slow
    @pytest.mark.parametrize("rho_c", [0.0, 0.05])
    def test_top_acc_at_scale(self, small_config, rho_c):
        world = make_world(small_config.with_overrides(rho_c=rho_c))
        data = sample_target_set(world, 10_000, 21)
        assert check_lemma_top_acc(world, data).satisfied
        corollary = check_top_acc_corollary(world, data)
        assert corollary.applicable and corollary.satisfied
        if rho_c == 0.0:
            assert corollary.rhs == 1.0


class TestTheorems:
    def test_uniform_bound_i2i(self, small_world, samples):
        shift = measure_retrieval_shift(small_world, RetrievalMode.I2I, draws=20_000, seed=3)
        check = check_theorem_uni(small_world, samples, 0.5, 0.5, 4, 0.1, RetrievalMode.I2I, shift,
                                  trials=10, seed=3)
        assert check.satisfied
        assert check.context["excess_max"] <= check.context["bound"]

    def test_uniform_bound_t2i_is_looser(self, adversarial_world):
        data = sample_target_set(adversarial_world, 300, 4)
        bounds = {}
        for mode in (RetrievalMode.I2I, RetrievalMode.T2I):
            shift = measure_retrieval_shift(adversarial_world, mode, draws=20_000, seed=4)
            check = check_theorem_uni(adversarial_world, data, 0.5, 0.5, 4, 0.1, mode, shift, trials=5, seed=4)
            assert check.satisfied
            bounds[mode] = check.context["bound"]
        assert bounds[RetrievalMode.I2I] < bounds[RetrievalMode.T2I]

    def test_uniform_bound_weights(self, small_world, samples):
        shift = measure_retrieval_shift(small_world, RetrievalMode.I2I, draws=1_000, seed=3)
        with pytest.raises(WeightSumViolation):
            check_theorem_uni(small_world, samples, 0.7, 0.7, 4, 0.1, RetrievalMode.I2I, shift, trials=1)

    def test_ensemble(self, adversarial_world):
        data = sample_target_set(adversarial_world, 500, 6)
        checks = check_theorem_ensemble(adversarial_world, data, 8, seed=6)
        assert [c.name for c in checks] == ["theorem_ensemble", "ensemble_corollary"]
        assert checks[0].satisfied
        assert not checks[1].failed

    def test_bernstein_coverage(self):
        world = make_world(WorldConfig(classes=10, dim=16, kappa=0.3, nu_target=0.6, db_per_cluster=2))
        check = check_bernstein(world, 16, 0.05, 200, seed=0)
        assert check.context["radius"] == pytest.approx(0.48829, abs=1e-5)
        assert check.satisfied

    @pytest.mark.slow
    @pytest.mark.parametrize("shots", [1, 4, 16])
    def test_uniform_bound_at_scale(self, adversarial_world, shots):
        data = sample_target_set(adversarial_world, 300, 8)
        bounds = {}
        for mode in (RetrievalMode.I2I, RetrievalMode.T2I):
            shift = measure_retrieval_shift(adversarial_world, mode, draws=20_000, seed=8)
            check = check_theorem_uni(adversarial_world, data, 0.5, 0.5, shots, 0.1, mode, shift,
                                      trials=200, seed=8)
            assert check.satisfied, f"{mode.value} K={shots}: {check.lhs}"
            bounds[mode] = check.context["bound"]
        assert bounds[RetrievalMode.I2I] < bounds[RetrievalMode.T2I]

    @pytest.mark.slow
    def test_ensemble_across_worlds(self):
        for seed in range(50):
            world = make_world(WorldConfig(classes=4, dim=8, kappa=0.1, nu_target=0.8, clusters_per_class=2,
                                           db_per_cluster=16, tau_mode=TauMode.ADVERSARIAL, master_seed=seed))
            checks = check_theorem_ensemble(world, sample_target_set(world, 500, seed), 8, seed=seed)
            assert checks[0].satisfied, f"seed={seed}"
            assert not checks[1].failed, f"seed={seed}"

    @pytest.mark.slow
    def test_bernstein_coverage_at_scale(self):
        world = make_world(WorldConfig(classes=10, dim=16, kappa=0.3, nu_target=0.6, db_per_cluster=2))
        check = check_bernstein(world, 16, 0.05, 1_000, seed=1)
        assert check.context["trials"] == 1_000
        assert check.satisfied
        assert check.context["max_deviation"] <= check.context["radius"]


class TestReportCsv:
    def test_rows(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(path, [("w0", BoundCheck("a", 0.5, 1.0)), ("global", check_toy_risk())])
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [r["world"] for r in rows] == ["w0", "global"]
        assert rows[1]["name"] == "toy_risk"
        assert rows[0]["applicable"] == "true"
