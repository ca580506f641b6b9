import numpy as np
import pytest

from src.controller import run_algorithm1
from src.estimator import (
    InsufficientDataError,
    OlsState,
    batch_solve,
    objective,
    ols_path,
    ols_solve,
    ols_update,
    split_theta,
    subsampled_estimate,
)
from src.linalg import DimensionError


def noiseless_data(rng, T=30):
    theta = rng.standard_normal((2, 3))
    Z = rng.standard_normal((T, 3))
    return theta, Z, Z @ theta.T


def test_batch_solve_recovers_exact_parameters():
    rng = np.random.default_rng(0)
    theta, Z, X = noiseless_data(rng)
    assert np.allclose(batch_solve(Z, X), theta)


def test_recursive_matches_batch():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((40, 3))
    X = Z @ rng.standard_normal((2, 3)).T + 0.1 * rng.standard_normal((40, 2))
    state = OlsState.empty(2, 1)
    for z, x in zip(Z, X):
        state = ols_update(state, z[:2], z[2:], x)
    assert state.count == 40
    assert np.allclose(ols_solve(state), batch_solve(Z, X))


def test_solution_minimizes_objective():
    rng = np.random.default_rng(2)
    Z = rng.standard_normal((25, 3))
    X = rng.standard_normal((25, 2))
    theta = batch_solve(Z, X)
    best = objective(theta, Z, X)
    for _ in range(20):
        assert objective(theta + 0.01 * rng.standard_normal(theta.shape), Z, X) >= best


def test_rank_deficient_data_gives_minimum_norm_solution():
    rng = np.random.default_rng(3)
    Z = np.hstack([rng.standard_normal((10, 2)), np.zeros((10, 1))])
    X = rng.standard_normal((10, 2))
    theta = batch_solve(Z, X)
    assert np.allclose(theta[:, 2], 0.0)


def test_empty_state_raises():
    with pytest.raises(InsufficientDataError):
        ols_solve(OlsState.empty(2, 1))
    with pytest.raises(InsufficientDataError):
        batch_solve(np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        ols_update(OlsState.empty(2, 1), np.zeros(2), np.zeros(2), np.zeros(2))


def test_ols_path_matches_batch_prefixes(system1):
    traj = run_algorithm1(system1, 20, 0)
    path = ols_path(traj.states, traj.controls)
    assert path.shape == (40, 2, 3)
    Z = traj.covariates()
    for t in (5, 17, 40):
        assert np.allclose(path[t - 1], batch_solve(Z[:t], traj.states[1 : t + 1]))


def test_controller_estimates_are_subsampled_ols(system1):
    traj = run_algorithm1(system1, 10, 4)
    assert np.allclose(subsampled_estimate(traj, 2, 0), system1.theta0_bar)
    for tau in (1, 5, 10):
        assert np.allclose(subsampled_estimate(traj, 2, tau), traj.estimates[tau])
    with pytest.raises(InsufficientDataError):
        subsampled_estimate(traj, 2, 11)
    with pytest.raises(ValueError):
        subsampled_estimate(traj, 2, -1)


def test_split_theta():
    A, B = split_theta(np.arange(6.0).reshape(2, 3))
    assert A.shape == (2, 2) and B.shape == (2, 1)


def test_noiseless_closed_loop_recovers_truth(system1):
    from dataclasses import replace

    from src.system import NoiseSpec

    plant = replace(system1, disturbance=NoiseSpec.zero(2), x0=np.array([1.0, 1.0]))
    traj = run_algorithm1(plant, 50, 0)
    assert np.allclose(traj.estimates[-1], plant.theta_star, atol=1e-8)


@pytest.mark.slow
def test_estimation_error_shrinks_with_data(system1):
    errors_early, errors_late = [], []
    for seed in range(20):
        traj = run_algorithm1(system1, 2000, seed)
        path = ols_path(traj.states, traj.controls)
        errors_early.append(np.linalg.norm(path[249] - system1.theta_star, 2))
        errors_late.append(np.linalg.norm(path[3999] - system1.theta_star, 2))
    assert np.median(errors_late) < np.median(errors_early)
