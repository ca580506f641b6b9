"""Plant model, noise laws and the sub-sampled closed-loop quantities.

The plant is ``X_{t+1} = A X_t + B U_t + W_t``. Viewed every ``kappa`` steps
the closed loop reads::

    Xbar_{tau+1} = A^kappa Xbar_tau + R_* sat_D(-g Xbar_tau) + Vbar_tau + Wbar_tau

where ``R_*`` is the reachability matrix, ``Vbar = R_* [V_newest; ...; V_oldest]``
and ``Wbar = sum_i A^i W_{newest - i}``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .linalg import (
    DimensionError,
    as_matrix,
    as_vector,
    matrix_power,
    pinv,
    sigma_min,
    spectral_norm,
)

logger = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "uniform_ball", "zero")
REACHABILITY_TOL = 1e-8


class NotReachableError(ValueError):
    """Raised when (A, B) is not kappa-step reachable."""


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Law of an i.i.d. noise sequence.

    ``gaussian`` draws ``L z`` with ``L`` the Cholesky factor of ``covariance``.
    ``uniform_ball`` is uniform on the closed ball of radius ``bound``; its
    covariance ``bound**2 / (dim + 2) * I`` is filled in automatically.
    """

    kind: str
    covariance: np.ndarray
    bound: Optional[float] = None
    _factor: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        cov = as_matrix(self.covariance, "covariance")
        if cov.shape[0] != cov.shape[1]:
            raise DimensionError(f"covariance must be square, got {cov.shape}")
        dim = cov.shape[0]
        factor = np.zeros_like(cov)
        if self.kind == "uniform_ball":
            if self.bound is None or self.bound < 0:
                raise ValueError("uniform_ball noise needs a nonnegative bound")
            cov = (self.bound ** 2 / (dim + 2)) * np.eye(dim)
        elif self.kind == "gaussian":
            try:
                factor = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError("gaussian covariance must be positive definite") from exc
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_factor", factor)

    @classmethod
    def gaussian(cls, covariance) -> "NoiseSpec":
        return cls("gaussian", as_matrix(covariance))

    @classmethod
    def uniform_ball(cls, dim: int, bound: float) -> "NoiseSpec":
        return cls("uniform_ball", np.eye(dim), float(bound))

    @classmethod
    def zero(cls, dim: int) -> "NoiseSpec":
        return cls("zero", np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` independent vectors, shape (size, dim)."""
        if self.kind == "zero":
            return np.zeros((size, self.dim))
        normals = rng.standard_normal((size, self.dim))
        if self.kind == "gaussian":
            return normals @ self._factor.T
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        radius = self.bound * rng.random((size, 1)) ** (1.0 / self.dim)
        # Guard against rounding pushing a draw past the bound.
        return np.minimum(radius, self.bound) * normals / norms


def sample_noise(spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.sample_many(rng, 1)[0]


@dataclass
class PlantConfig:
    """True system plus everything the adaptive controller needs."""

    A: np.ndarray
    B: np.ndarray
    kappa: int
    disturbance: NoiseSpec
    excitation: NoiseSpec
    U_max: float
    C: float
    x0: np.ndarray
    A0_bar: Optional[np.ndarray] = None
    B0_bar: Optional[np.ndarray] = None
    learn: bool = True

    def __post_init__(self):
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be {n}x{n} to match B {self.B.shape}, got {self.A.shape}")
        self.x0 = as_vector(self.x0, "x0")
        if self.x0.shape != (n,):
            raise DimensionError(f"x0 must have {n} entries, got {self.x0.size}")
        if not 1 <= self.kappa <= n:
            raise ValueError(f"kappa must lie in [1, {n}], got {self.kappa}")
        if not 0 < self.C < self.U_max:
            raise ValueError(f"need 0 < C < U_max, got C={self.C}, U_max={self.U_max}")
        if self.disturbance.dim != n:
            raise DimensionError(f"disturbance dimension {self.disturbance.dim} != n={n}")
        if self.excitation.dim != m:
            raise DimensionError(f"excitation dimension {self.excitation.dim} != m={m}")
        if self.disturbance.kind == "uniform_ball":
            raise ValueError("disturbance must be gaussian or zero")
        if self.excitation.kind == "gaussian":
            raise ValueError("excitation must be bounded (uniform_ball or zero)")
        if self.excitation.kind == "uniform_ball" and self.excitation.bound > self.C:
            raise ValueError(f"excitation bound {self.excitation.bound} exceeds C={self.C}")
        if self.A0_bar is None:
            self.A0_bar = np.zeros((n, n))
        if self.B0_bar is None:
            self.B0_bar = np.ones((n, m))
        self.A0_bar = as_matrix(self.A0_bar, "A0_bar")
        self.B0_bar = as_matrix(self.B0_bar, "B0_bar")
        if self.A0_bar.shape != (n, n) or self.B0_bar.shape != (n, m):
            raise DimensionError("initial estimate shapes do not match (A, B)")
        if not np.any(self.B0_bar):
            raise ValueError("initial estimate B0_bar must be nonzero")
        if spectral_norm(self.A) > 1.0 + 1e-12:
            logger.warning(f"||A|| = {spectral_norm(self.A):.4f} > 1; bound formulas assume ||A|| <= 1")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def D(self) -> float:
        return self.U_max - self.C

    @property
    def theta_star(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    @property
    def theta0_bar(self) -> np.ndarray:
        return np.hstack([self.A0_bar, self.B0_bar])


@dataclass(frozen=True, eq=False)
class SubsampledContext:
    R_star: np.ndarray
    A_pow_kappa: np.ndarray
    W_stack_map: np.ndarray
    norm_R: float
    norm_R_pinv: float
    R_pinv: np.ndarray

    @property
    def kappa(self) -> int:
        return self.W_stack_map.shape[1] // self.W_stack_map.shape[0]


@dataclass
class Trajectory:
    """One closed-loop run.

    ``states`` has shape (T+1, n); ``controls``, ``excitations`` (T, m);
    ``disturbances`` (T, n); ``estimates`` (tau_count+1, n, n+m) holds the
    sub-sampled estimates starting from the initial one.
    """

    states: np.ndarray
    controls: np.ndarray
    excitations: np.ndarray
    disturbances: np.ndarray
    estimates: np.ndarray

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def state_norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)

    def subsampled_states(self, kappa: int) -> np.ndarray:
        return self.states[::kappa]

    def covariates(self) -> np.ndarray:
        """Z_t = (X_{t-1}, U_{t-1}) for t = 1..T, shape (T, n+m)."""
        return np.hstack([self.states[:-1], self.controls])

    def to_frame(self) -> pd.DataFrame:
        n = self.states.shape[1]
        m = self.controls.shape[1]
        pad = np.full((1, m), np.nan)
        frame = {"t": np.arange(self.states.shape[0])}
        for i in range(n):
            frame[f"x_{i + 1}"] = self.states[:, i]
        controls = np.vstack([self.controls, pad])
        excitations = np.vstack([self.excitations, pad])
        for j in range(m):
            frame[f"u_{j + 1}"] = controls[:, j]
        for j in range(m):
            frame[f"v_{j + 1}"] = excitations[:, j]
        frame["norm_x"] = self.state_norms()
        return pd.DataFrame(frame)


def reachability_matrix(A, B, kappa: int) -> np.ndarray:
    """[B, AB, ..., A^{kappa-1} B]."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[0] != A.shape[1] or A.shape[0] != B.shape[0]:
        raise DimensionError(f"incompatible A {A.shape} and B {B.shape}")
    blocks = [B]
    for _ in range(1, kappa):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def reachability_stack(A_stack: np.ndarray, B_stack: np.ndarray, kappa: int) -> np.ndarray:
    """Batched reachability matrices for stacks (N, n, n) and (N, n, m)."""
    blocks = [B_stack]
    for _ in range(1, kappa):
        blocks.append(A_stack @ blocks[-1])
    return np.concatenate(blocks, axis=-1)


def is_reachable(A, B, kappa: int) -> Tuple[bool, float]:
    R = reachability_matrix(A, B, kappa)
    smin = sigma_min(R) if R.shape[1] >= R.shape[0] else 0.0
    return smin > REACHABILITY_TOL * max(1.0, spectral_norm(R)), smin


def plant_step(A, B, x, u, w) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    x, u, w = (np.asarray(v, dtype=float) for v in (x, u, w))
    if A.shape[1] != x.shape[0] or B.shape[1] != u.shape[0] or A.shape[0] != w.shape[0]:
        raise DimensionError("plant_step operands have inconsistent dimensions")
    return A @ x + B @ u + w


def build_subsampled_context(cfg: PlantConfig) -> SubsampledContext:
    reachable, smin = is_reachable(cfg.A, cfg.B, cfg.kappa)
    if not reachable:
        raise NotReachableError(
            f"(A, B) is not {cfg.kappa}-step reachable (sigma_min(R) = {smin:.3e})"
        )
    R = reachability_matrix(cfg.A, cfg.B, cfg.kappa)
    powers = [np.eye(cfg.n)]
    for _ in range(1, cfg.kappa):
        powers.append(cfg.A @ powers[-1])
    R_pinv = pinv(R)
    return SubsampledContext(
        R_star=R,
        A_pow_kappa=matrix_power(cfg.A, cfg.kappa),
        W_stack_map=np.hstack(powers),
        norm_R=spectral_norm(R),
        norm_R_pinv=spectral_norm(R_pinv),
        R_pinv=R_pinv,
    )


def _stack_block(block: Sequence, kappa: int, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(block, dtype=float)
    if arr.shape != (kappa, dim):
        raise DimensionError(f"{what} block must have shape ({kappa}, {dim}), got {arr.shape}")
    return arr.reshape(-1)


def aggregate_disturbance(ctx: SubsampledContext, w_block: Sequence) -> np.ndarray:
    """Wbar for a block of kappa disturbances given newest first."""
    n = ctx.W_stack_map.shape[0]
    return ctx.W_stack_map @ _stack_block(w_block, ctx.kappa, n, "disturbance")


def aggregate_excitation(ctx: SubsampledContext, v_block: Sequence) -> np.ndarray:
    """Vbar for a block of kappa excitations given newest first."""
    m = ctx.R_star.shape[1] // ctx.kappa
    return ctx.R_star @ _stack_block(v_block, ctx.kappa, m, "excitation")


def subsampled_step(
    ctx: SubsampledContext,
    x_bar: np.ndarray,
    ce_part: np.ndarray,
    v_block: Sequence,
    w_block: Sequence,
) -> np.ndarray:
    """One step of the sub-sampled loop given the stacked saturated CE control."""
    return (
        ctx.A_pow_kappa @ x_bar
        + ctx.R_star @ ce_part
        + aggregate_excitation(ctx, v_block)
        + aggregate_disturbance(ctx, w_block)
    )


def split_blocks(stacked: np.ndarray, kappa: int) -> List[np.ndarray]:
    return list(np.asarray(stacked).reshape(kappa, -1))
