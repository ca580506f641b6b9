"""Saturated certainty-equivalent deadbeat control and the adaptive loop.

Every ``kappa`` steps the controller plans a stacked block of controls
``Ubar = sat_D(-g(Abar, Bbar) x) + [V_newest; ...; V_oldest]``, applies it one
step at a time (oldest block last in the stack, first in time), and refreshes
its estimate with ordinary least squares.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .estimator import OlsState, ols_solve, ols_update
from .linalg import DimensionError, matrix_power, pinv
from .system import PlantConfig, Trajectory, plant_step, reachability_matrix

logger = logging.getLogger(__name__)


def sat(x, r: float) -> np.ndarray:
    """Radial projection of ``x`` onto the closed ball of radius ``r``."""
    if r <= 0:
        raise ValueError(f"saturation radius must be positive, got {r}")
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm <= r:
        return x
    return (r / norm) * x


def sat_rows(x: np.ndarray, r: float) -> np.ndarray:
    """Row-wise ``sat`` for an array of shape (N, d)."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.where(norms > r, r / np.where(norms > 0, norms, 1.0), 1.0)
    return x * scale


def deadbeat_gain(A_hat, B_hat, kappa: int) -> np.ndarray:
    """g(A', B') = R_kappa(A', B')^+ (A')^kappa, shape (kappa*m, n)."""
    return pinv(reachability_matrix(A_hat, B_hat, kappa)) @ matrix_power(A_hat, kappa)


@dataclass
class ControllerState:
    theta_bar: np.ndarray
    D: float
    kappa: int

    @property
    def n(self) -> int:
        return self.theta_bar.shape[0]

    @property
    def A_bar(self) -> np.ndarray:
        return self.theta_bar[:, : self.n]

    @property
    def B_bar(self) -> np.ndarray:
        return self.theta_bar[:, self.n:]

    def gain(self) -> np.ndarray:
        return deadbeat_gain(self.A_bar, self.B_bar, self.kappa)


def block_control(
    state: ControllerState, x_bar, v_block: Sequence
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Plan one block of controls.

    Args:
        state: current estimate and saturation level.
        x_bar: state at the start of the block.
        v_block: ``kappa`` excitations, newest first.

    Returns:
        Per-step controls in forward time order and the saturated CE part.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    m = state.theta_bar.shape[1] - state.n
    v = np.asarray(v_block, dtype=float)
    if x_bar.shape != (state.n,) or v.shape != (state.kappa, m):
        raise DimensionError(
            f"expected x of size {state.n} and {state.kappa} excitations of size {m}"
        )
    ce_part = sat(-state.gain() @ x_bar, state.D)
    stacked = ce_part + v.reshape(-1)
    # Stack is newest first; reverse to get forward time order.
    u_block = list(stacked.reshape(state.kappa, m)[::-1])
    return u_block, ce_part


def run_algorithm1(cfg: PlantConfig, horizon_tau: int, seed) -> Trajectory:
    """Run the adaptive input-constrained controller for ``horizon_tau`` blocks.

    ``seed`` is anything ``numpy.random.default_rng`` accepts, including a
    ``SeedSequence``.
    """
    if horizon_tau < 1:
        raise ValueError(f"horizon_tau must be >= 1, got {horizon_tau}")
    rng = np.random.default_rng(seed)
    n, m, kappa = cfg.n, cfg.m, cfg.kappa
    steps = kappa * horizon_tau

    states = np.empty((steps + 1, n))
    controls = np.empty((steps, m))
    excitations = np.empty((steps, m))
    disturbances = np.empty((steps, n))
    estimates = np.empty((horizon_tau + 1, n, n + m))

    state = ControllerState(theta_bar=cfg.theta0_bar.copy(), D=cfg.D, kappa=kappa)
    ols = OlsState.empty(n, m)
    states[0] = cfg.x0
    estimates[0] = state.theta_bar

    for tau in range(horizon_tau):
        t0 = kappa * tau
        v_forward = cfg.excitation.sample_many(rng, kappa)
        u_block, _ = block_control(state, states[t0], v_forward[::-1])
        for i in range(kappa):
            t = t0 + i
            w = cfg.disturbance.sample_many(rng, 1)[0]
            states[t + 1] = plant_step(cfg.A, cfg.B, states[t], u_block[i], w)
            controls[t] = u_block[i]
            excitations[t] = v_forward[i]
            disturbances[t] = w
            ols = ols_update(ols, states[t], u_block[i], states[t + 1])
        if cfg.learn:
            state.theta_bar = ols_solve(ols)
        estimates[tau + 1] = state.theta_bar

    logger.debug(f"algorithm run finished: {steps} steps, final |x| = {np.linalg.norm(states[-1]):.3f}")
    return Trajectory(states, controls, excitations, disturbances, estimates)


def run_uncontrolled(cfg: PlantConfig, horizon: int, seed) -> Trajectory:
    """Open-loop baseline: U = 0 and V = 0 at every step."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng(seed)
    n, m = cfg.n, cfg.m
    disturbances = cfg.disturbance.sample_many(rng, horizon)
    states = np.empty((horizon + 1, n))
    states[0] = cfg.x0
    for t in range(horizon):
        states[t + 1] = cfg.A @ states[t] + disturbances[t]
    zeros = np.zeros((horizon, m))
    return Trajectory(states, zeros, zeros.copy(), disturbances, cfg.theta0_bar[None].copy())
