import numpy as np
import pytest

from src.controller import (
    ControllerState,
    block_control,
    deadbeat_gain,
    run_algorithm1,
    run_uncontrolled,
    sat,
    sat_rows,
)
from src.linalg import DimensionError
from src.system import NoiseSpec, PlantConfig, reachability_matrix


def test_sat_inside_and_outside():
    x = np.array([0.3, 0.4])
    assert np.array_equal(sat(x, 1.0), x)
    out = sat(np.array([3.0, 4.0]), 1.0)
    assert np.linalg.norm(out) == pytest.approx(1.0)
    assert np.allclose(out, [0.6, 0.8])
    with pytest.raises(ValueError):
        sat(x, 0.0)


def test_sat_rows_matches_sat():
    rng = np.random.default_rng(0)
    x = 3.0 * rng.standard_normal((50, 3))
    x[0] = 0.0
    expected = np.array([sat(row, 2.0) for row in x])
    assert np.allclose(sat_rows(x, 2.0), expected)


def test_deadbeat_gain_cancels_true_dynamics(system1):
    g = deadbeat_gain(system1.A, system1.B, 2)
    R = reachability_matrix(system1.A, system1.B, 2)
    assert g.shape == (2, 2)
    assert np.allclose(R @ g, np.linalg.matrix_power(system1.A, 2))


def test_block_control_respects_input_bound(system1):
    rng = np.random.default_rng(1)
    state = ControllerState(theta_bar=system1.theta_star, D=system1.D, kappa=2)
    for _ in range(100):
        x = 50.0 * rng.standard_normal(2)
        v = system1.excitation.sample_many(rng, 2)
        u_block, ce = block_control(state, x, v)
        assert len(u_block) == 2
        assert np.linalg.norm(ce) <= system1.D + 1e-12
        assert all(np.linalg.norm(u) <= system1.U_max + 1e-12 for u in u_block)


def test_block_control_reverses_stack():
    state = ControllerState(theta_bar=np.hstack([np.zeros((2, 2)), np.eye(2)[:, :1]]), D=1.0, kappa=2)
    v_newest_first = np.array([[0.1], [0.2]])
    u_block, ce = block_control(state, np.zeros(2), v_newest_first)
    assert np.allclose(ce, 0.0)
    assert np.allclose(u_block[0], [0.2])
    assert np.allclose(u_block[1], [0.1])
    with pytest.raises(DimensionError):
        block_control(state, np.zeros(3), v_newest_first)


def test_known_system_is_driven_to_zero_in_one_block(system1):
    plant = PlantConfig(
        A=system1.A, B=system1.B, kappa=2,
        disturbance=NoiseSpec.zero(2), excitation=NoiseSpec.zero(1),
        U_max=10.0, C=0.1, x0=np.array([0.1, 0.1]),
        A0_bar=system1.A, B0_bar=system1.B, learn=False,
    )
    traj = run_algorithm1(plant, 3, 0)
    assert np.allclose(traj.states[2:], 0.0, atol=1e-12)
    assert np.allclose(traj.estimates, system1.theta_star)


def test_adaptive_run_is_reproducible_and_bounded(system1):
    a = run_algorithm1(system1, 200, 7)
    b = run_algorithm1(system1, 200, 7)
    assert np.array_equal(a.states, b.states)
    assert a.states.shape == (401, 2)
    assert a.estimates.shape == (201, 2, 3)
    assert np.allclose(a.estimates[0], system1.theta0_bar)
    assert np.linalg.norm(a.controls, axis=1).max() <= system1.U_max + 1e-12
    assert np.linalg.norm(a.excitations, axis=1).max() <= system1.C + 1e-12


def test_estimates_approach_truth(system1):
    traj = run_algorithm1(system1, 1000, 11)
    error = np.linalg.norm(traj.estimates[-1] - system1.theta_star, 2)
    assert error < 0.5


def test_uncontrolled_run_applies_no_input(system1):
    traj = run_uncontrolled(system1, 50, 0)
    assert np.array_equal(traj.controls, np.zeros((50, 1)))
    assert np.allclose(traj.states[1], system1.A @ traj.states[0] + traj.disturbances[0])
    with pytest.raises(ValueError):
        run_algorithm1(system1, 0, 0)
