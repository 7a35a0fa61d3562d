"""Empirical checks of the correction, sampling, degeneracy and determinism properties."""

import math
from dataclasses import replace

import numpy as np
import pytest

from fedlga_sim.server import Strategy
from fedlga_sim.simulation import ExperimentConfig
from fedlga_sim.verify import (
    SUITES,
    ApproxErrorReport,
    ApproxTrial,
    approximation_error_study,
    degeneracy_check,
    run_suite,
    sampling_study,
)


@pytest.fixture
def iid_like_config():
    """Two well-separated classes, every device holds both."""
    return ExperimentConfig(
        n_devices=10,
        k_selected=4,
        local_steps=5,
        batch_size=10,
        rho=0.5,
        num_classes=2,
        input_dim=5,
        samples_per_class=120,
        test_per_class=20,
        class_sep=1.0,
        noise_sigma=0.3,
        classes_per_device=2,
    )


class TestUniformSampling:
    """Every device is selected with frequency K/N."""

    def test_single_device_always_selected(self):
        report = sampling_study(1, 3, 10_000, seed=0)
        assert report.frequencies == [3.0]
        assert report.max_deviation == 0.0
        assert report.within_threshold

    def test_frequencies_within_three_sigma(self):
        """100 000 rounds of N=50, K=10 keep every device within 3 binomial sigmas of 0.2."""
        report = sampling_study(50, 10, 100_000, seed=0)
        assert report.expected == pytest.approx(0.2)
        assert sum(report.frequencies) == pytest.approx(10.0)
        assert report.sigma == pytest.approx(math.sqrt(10 * 0.02 * 0.98 / 100_000))
        assert report.threshold == pytest.approx(3 * report.sigma)
        assert report.max_deviation < report.threshold
        assert report.within_threshold

    def test_too_few_trials(self):
        with pytest.raises(ValueError, match="10000"):
            sampling_study(5, 2, 100, seed=0)


class TestDegeneracy:
    """Without stragglers the correction is the identity and fedlga reduces to fedavg."""

    def test_no_stragglers_matches_fedavg_bit_for_bit(self, small_config):
        report = degeneracy_check(replace(small_config, rho=0.0, rounds=8))
        assert report.identical
        assert report.rounds_compared == 8
        assert report.first_divergence is None
        assert report.max_abs_diff == 0.0

    def test_stragglers_break_equivalence(self, small_config):
        report = degeneracy_check(small_config)
        assert not report.identical
        assert report.first_divergence[0] == 0
        assert report.max_abs_diff > 0.0

    def test_global_rate_breaks_equivalence(self, small_config):
        report = degeneracy_check(replace(small_config, rho=0.0, eta_g=2.0))
        assert not report.identical
        assert report.to_dict()["first_divergence"][0] == 0


class TestApproximationError:
    """Corrected straggler updates against the true full-run update."""

    def test_correction_helps_when_device_gradients_agree(self, iid_like_config):
        """When every device holds every class the correction beats the raw partial update."""
        report = approximation_error_study(iid_like_config, trials=60)

        assert len(report.trials) + report.diverged == 60
        assert report.diverged == 0
        assert set(report.eta_medians) == {1e-3, 3e-3, 1e-2, 3e-2, 1e-1}
        assert set(report.tau_medians) == {2, 3, 4}
        assert report.win_rate > 0.5
        assert 0.5 < report.eta_exponent < 2.5
        assert report.tau_monotone
        assert report.empirical_m > 0.0

    def test_error_grows_with_learning_rate(self, iid_like_config):
        report = approximation_error_study(iid_like_config, trials=30)
        medians = [report.eta_medians[eta] for eta in sorted(report.eta_medians)]
        assert medians[-1] > medians[0]

    def test_requires_enough_trials(self, iid_like_config):
        with pytest.raises(ValueError, match="30 trials"):
            approximation_error_study(iid_like_config, trials=10)

    def test_requires_stragglers_to_exist(self, small_config):
        config = replace(small_config, rho=0.0, local_steps=2)
        with pytest.raises(ValueError, match="tau_max"):
            approximation_error_study(config, trials=30)

    def test_correction_overshoots_on_default_task(self):
        """On two-class shards the outer-product correction reverses the straggler update.

        The residual error is first order in eta_l and the corrected update loses to the
        raw partial one in almost every trial.
        """
        report = approximation_error_study(ExperimentConfig(), trials=200)
        assert report.win_rate < 0.25
        assert 0.5 < report.eta_exponent < 1.5

    def test_tau_monotone_flag(self):
        trial = ApproxTrial(0.1, 2, 0.1, 0.2, 1.0)
        rising = ApproxErrorReport([trial], 1.0, 2.0, 2.0, {}, {2: 0.1, 3: 0.3}, 1.0)
        falling = ApproxErrorReport([trial], 1.0, 2.0, 2.0, {}, {2: 0.3, 3: 0.1}, 1.0)
        assert rising.tau_monotone
        assert not falling.tau_monotone
        assert trial.corrected_wins


class TestSuites:
    """The ``check`` command's suites."""

    @pytest.mark.parametrize("name", ["gradient", "hessian", "partition", "formats"])
    def test_fast_suites_pass(self, small_config, name):
        (result,) = run_suite(name, small_config)
        assert result.name == name
        assert result.passed, result.details
        assert result.elapsed_ms >= 0.0

    def test_determinism_suite(self, small_config):
        (result,) = run_suite("determinism", small_config)
        assert result.passed
        assert result.to_dict()["rounds"] == 20

    def test_degeneracy_suite_forces_no_stragglers(self, small_config):
        (result,) = run_suite("degeneracy", replace(small_config, strategy=Strategy.FEDAVG))
        assert result.passed
        assert result.details["rounds_compared"] == 50

    def test_unknown_suite(self, small_config):
        with pytest.raises(KeyError, match="unknown suite"):
            run_suite("nonsense", small_config)

    def test_suite_registry(self):
        assert set(SUITES) == {
            "gradient",
            "hessian",
            "partition",
            "sampling",
            "degeneracy",
            "approximation",
            "heterogeneity",
            "determinism",
            "formats",
        }

    def test_report_is_json_friendly(self, small_config):
        (result,) = run_suite("partition", small_config)
        row = result.to_dict()
        assert row["suite"] == "partition"
        assert row["passed"] is True
        assert row["failures"] == []
        assert np.isfinite(row["elapsed_ms"])

    def test_sampling_suite(self, small_config):
        (result,) = run_suite("sampling", small_config)
        assert result.passed, result.details
        assert result.details["trials"] == 100_000

    def test_approximation_suite_without_stragglers_fails_cleanly(self, small_config):
        """A config whose tau_max is below 2 fails the suite instead of raising."""
        config = replace(small_config, rho=0.0, local_steps=2)
        (result,) = run_suite("approximation", config)
        assert not result.passed
        assert "tau_max >= 2" in result.details["skipped"]

    def test_heterogeneity_suite_fails_on_default_task(self):
        """FedAvg reaches 0.80 test accuracy, the corrected runs never do."""
        (result,) = run_suite("heterogeneity", ExperimentConfig())
        assert not result.passed
        assert result.details["fedavg_median_rounds"] < 300
        assert result.details["fedlga_median_rounds"] == math.inf

    def test_hessian_suite_uses_absolute_tolerance(self, small_config):
        (result,) = run_suite("hessian", small_config)
        assert result.details["max_abs_diff"] <= 1e-12
