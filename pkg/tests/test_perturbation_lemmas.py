"""Randomized checks that the perturbation inequalities hold on sampled inputs."""
import numpy as np
import pytest

from src.diagnostics import (
    certify_control_error,
    certify_direction_bound,
    certify_inverse_bound,
    certify_linear_control_bound,
    certify_power_bound,
    certify_power_product_bound,
    certify_product_bound,
    certify_saturation_bounds,
    perturbed_estimate,
    run_certification_suite,
)
from src.experiments import benchmark_plant
from src.linalg import spectral_norm


@pytest.mark.parametrize(
    "suite",
    [certify_product_bound, certify_inverse_bound, certify_direction_bound],
)
def test_vectorized_suites_pass(suite):
    result = suite(5000, np.random.default_rng(0))
    assert result.samples > 4000
    assert result.passed, f"{result.name}: {result.violations} violations"
    assert result.worst_slack >= -1e-9


def test_power_suites_pass():
    rng = np.random.default_rng(1)
    for result in (certify_power_bound(1000, rng), certify_power_product_bound(1000, rng)):
        assert result.passed, result.name


def test_saturation_suites_pass():
    nonexpansive, saturated = certify_saturation_bounds(5000, np.random.default_rng(2))
    assert nonexpansive.passed
    assert saturated.passed
    assert saturated.samples > 0


@pytest.mark.parametrize("index", [1, 2, 3])
def test_control_error_bounds_on_benchmarks(index):
    plant = benchmark_plant(index)
    rng = np.random.default_rng(index)
    assert certify_control_error(plant.A, plant.B, 2, plant.D, 3000, rng).passed
    assert certify_linear_control_bound(plant.A, plant.B, 2, plant.D, 3000, rng).passed


def test_full_suite_reports_every_check(system1):
    results = run_certification_suite(system1.A, system1.B, 2, system1.D, 500, 1000, np.random.default_rng(3))
    names = [r.name for r in results]
    assert len(names) == 9 and len(set(names)) == 9
    assert all(r.passed for r in results)


def test_perturbed_estimate_is_on_the_sphere(system1):
    A_bar, B_bar = perturbed_estimate(system1.A, system1.B, 0.05, np.random.default_rng(0))
    assert spectral_norm(A_bar - system1.A) == pytest.approx(0.05)
    assert spectral_norm(B_bar - system1.B) == pytest.approx(0.05)
