"""Ordinary least squares over state-input pairs.

With ``Z_t = (X_{t-1}, U_{t-1})`` the estimate after ``t`` transitions is any
minimizer of ``sum_s |X_s - theta Z_s|^2``. Only the sufficient statistics
``gram = sum Z Z^T`` and ``cross = sum X Z^T`` are kept; the minimum-norm
minimizer ``cross @ pinv(gram)`` is returned when ``gram`` is singular.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DimensionError, pinv


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OlsState:
    gram: np.ndarray
    cross: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, n: int, m: int) -> "OlsState":
        return cls(np.zeros((n + m, n + m)), np.zeros((n, n + m)), 0)

    @property
    def n(self) -> int:
        return self.cross.shape[0]


def ols_update(state: OlsState, x_prev, u_prev, x_next) -> OlsState:
    x_prev = np.asarray(x_prev, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    z = np.concatenate([x_prev, u_prev])
    if z.shape[0] != state.gram.shape[0] or x_next.shape[0] != state.n:
        raise DimensionError("OLS update dimensions do not match the accumulated state")
    return OlsState(
        gram=state.gram + np.outer(z, z),
        cross=state.cross + np.outer(x_next, z),
        count=state.count + 1,
    )


def ols_solve(state: OlsState) -> np.ndarray:
    if state.count == 0:
        raise InsufficientDataError("no transitions observed yet")
    return state.cross @ pinv(state.gram)


def batch_solve(Z: np.ndarray, X: np.ndarray) -> np.ndarray:
    """One-pass normal equations for rows ``Z`` (T, n+m) and targets ``X`` (T, n)."""
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    if Z.shape[0] == 0:
        raise InsufficientDataError("no transitions observed yet")
    return (X.T @ Z) @ pinv(Z.T @ Z)


def objective(theta: np.ndarray, Z: np.ndarray, X: np.ndarray) -> float:
    residual = X - Z @ theta.T
    return float(np.sum(residual ** 2))


def ols_path(states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Estimates after every prefix of a trajectory.

    Returns an array of shape (T, n, n+m) whose entry ``t-1`` is the estimate
    from the first ``t`` transitions.
    """
    Z = np.hstack([states[:-1], controls])
    X = states[1:]
    grams = np.cumsum(np.einsum("ti,tj->tij", Z, Z), axis=0)
    crosses = np.cumsum(np.einsum("ti,tj->tij", X, Z), axis=0)
    return crosses @ pinv(grams)


def subsampled_estimate(trajectory, kappa: int, tau: int, initial=None) -> np.ndarray:
    """theta_bar_tau: the initial estimate at tau = 0, else OLS after kappa*tau transitions."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    if tau == 0:
        return np.array(trajectory.estimates[0] if initial is None else initial, dtype=float)
    steps = kappa * tau
    if steps > trajectory.controls.shape[0]:
        raise InsufficientDataError(
            f"need {steps} transitions, trajectory has {trajectory.controls.shape[0]}"
        )
    Z = np.hstack([trajectory.states[:steps], trajectory.controls[:steps]])
    return batch_solve(Z, trajectory.states[1 : steps + 1])


def split_theta(theta: np.ndarray):
    n = theta.shape[0]
    return theta[:, :n], theta[:, n:]
