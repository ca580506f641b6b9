import numpy as np
import pytest

from src.bounds import DriftRates, default_epsilon, drift_rates
from src.diagnostics import (
    CoverageReport,
    _log_mean_exp_jackknife,
    bmsb_proxy,
    bmsb_proxy_from_covariates,
    coverage_estimation_bound,
    coverage_theorem2,
    in_drift_set,
    perturbed_estimate,
    verify_drift,
)
from src.experiments import run_trials

# The first three lie inside the drift set of the high-margin plant, the rest outside.
Z_POINTS = np.array([[0.0, 0.0], [0.1, 0.1], [1.0, -1.0], [5.0, 2.0], [10.0, 0.0], [-20.0, 5.0]])


def test_jackknife_of_constant_sample():
    est, ci = _log_mean_exp_jackknife(np.full(100, 2.5))
    assert est == pytest.approx(2.5)
    assert ci == pytest.approx(0.0, abs=1e-12)


def test_drift_set_membership(ctx):
    assert in_drift_set(ctx, np.zeros(2))
    assert not in_drift_set(ctx, np.array([1e3, 1e3]))


def test_drift_holds_for_frozen_truth(mc_ctx):
    plant = mc_ctx.plant
    report = verify_drift(mc_ctx, 0.0, plant.theta_star, 0, 5000, np.random.default_rng(0), z_points=Z_POINTS)
    assert report.passed, report.to_dict()
    assert report.inside[:3].all() and not report.inside[3:].any()


def test_drift_holds_for_perturbed_estimate(mc_ctx):
    plant = mc_ctx.plant
    rng = np.random.default_rng(1)
    eps = mc_ctx.m_q / 2
    theta = np.hstack(perturbed_estimate(plant.A, plant.B, eps, rng))
    report = verify_drift(mc_ctx, eps, theta, 0, 5000, rng, z_points=Z_POINTS)
    assert report.passed, report.to_dict()


def test_injected_fault_is_detected(mc_ctx):
    good = drift_rates(mc_ctx, 0.0)
    bad = DriftRates(good.lam * 1e-6, good.beta * 1e-6, 0.0, good.log_lam - 13.8, good.log_beta - 13.8)
    report = verify_drift(mc_ctx, 0.0, mc_ctx.plant.theta_star, 6, 2000, np.random.default_rng(2), rates=bad)
    assert not report.passed
    assert report.to_dict()["worst_slack"] < 0


def test_drift_rejects_estimate_outside_ball(mc_ctx):
    plant = mc_ctx.plant
    theta = plant.theta_star + 1.0
    with pytest.raises(ValueError):
        verify_drift(mc_ctx, 0.01, theta, 2, 100, np.random.default_rng(0))


def test_coverage_report_fraction():
    report = CoverageReport("x", trials=10, successes=9, target_probability=0.8, per_trial_margin=[0.0] * 10)
    assert report.fraction == pytest.approx(0.9)
    assert report.passed
    assert report.to_dict()["fraction"] == pytest.approx(0.9)


def test_proxy_extremes():
    rng = np.random.default_rng(0)
    big = [100.0 * rng.standard_normal((20, 3))]
    assert bmsb_proxy_from_covariates(big, 2, 1e-8 * np.eye(3), 30, rng).p_hat == pytest.approx(1.0)
    zeros = [np.zeros((20, 3))]
    proxy = bmsb_proxy_from_covariates(zeros, 2, np.eye(3), 30, rng)
    assert proxy.p_hat == 0.0
    assert proxy.blocks == 19
    assert proxy.label == "proxy"
    with pytest.raises(ValueError):
        bmsb_proxy_from_covariates([np.zeros((2, 3))], 2, np.eye(3), 30, rng)


def test_proxy_on_closed_loop_runs(system1):
    trajectories = run_trials(system1, "adaptive", 200, 0, 3)
    proxy = bmsb_proxy(trajectories, 1, 0.01 * np.eye(3), 50, np.random.default_rng(0))
    assert 0.0 < proxy.p_hat <= 1.0
    assert proxy.blocks == 3 * 200


@pytest.mark.slow
def test_estimation_bound_coverage(ctx):
    from src.bounds import burn_in_T0

    T0 = burn_in_T0(ctx, 0.2, ctx.plant.x0)
    report = coverage_estimation_bound(ctx, 0.2, 5, T0 + 50, master_seed=0)
    assert report.trials == 5
    assert report.passed
    assert report.per_check["T0"] == T0


@pytest.mark.slow
def test_envelope_coverage(ctx):
    eps = default_epsilon(ctx)
    report = coverage_theorem2(ctx, eps, 0.2, 5, [0, 1, 10, 100], master_seed=0)
    assert report.successes == 5
    assert set(report.per_check) == {"tau=0", "tau=1", "tau=10", "tau=100"}
    assert not report.flags


def test_proxy_matches_gaussian_tail():
    rng = np.random.default_rng(5)
    z = [rng.standard_normal((20_000, 1))]
    proxy = bmsb_proxy_from_covariates(z, 1, np.eye(1), 10, rng)
    assert proxy.p_hat == pytest.approx(0.3173, abs=0.015)


def test_proxy_is_scale_consistent():
    data = [np.random.default_rng(6).standard_normal((50, 3))]
    a = bmsb_proxy_from_covariates(data, 2, 0.5 * np.eye(3), 40, np.random.default_rng(7))
    b = bmsb_proxy_from_covariates([2.0 * data[0]], 2, 2.0 * np.eye(3), 40, np.random.default_rng(7))
    assert a.p_hat == b.p_hat


def test_noiseless_drift_inside_set_is_exact(high_margin_plant):
    from dataclasses import replace

    from src.bounds import MgfEstimate, build_bound_context
    from src.system import NoiseSpec

    plant = replace(high_margin_plant, disturbance=NoiseSpec.zero(2), excitation=NoiseSpec.zero(1))
    ctx = build_bound_context(plant, None, M_V_bar=MgfEstimate(0.0, 0.0), M_W_bar=MgfEstimate(0.0, 0.0))
    report = verify_drift(ctx, 0.0, plant.theta_star, 0, 10, np.random.default_rng(0), z_points=np.zeros((1, 2)))
    assert report.log_estimates[0] == pytest.approx(0.0, abs=1e-12)
    assert report.passed
