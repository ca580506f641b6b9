"""Monte Carlo validators for the stability and estimation guarantees.

Run through the pipeline::

    python -m src.pipeline check --config config.yaml
    python -m src.pipeline diagnose --config config.yaml

``check`` covers the deterministic inequality suites and the one-step drift
condition; ``diagnose`` covers the coverage of the estimation bound, the
stability envelope and the small-ball proxy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .bounds import (
    BoundContext,
    DriftRates,
    InadmissibleEpsilonError,
    MonteCarloError,
    burn_in_T0,
    drift_rates,
    estimation_error_curve,
    lemma1_constants,
    q1 as critical_radius,
    q10,
    q2,
    q9,
    theorem2_envelope,
)
from .controller import deadbeat_gain, sat_rows
from .estimator import ols_path
from .experiments import run_trials
from .linalg import batch_sigma_min, batch_spectral_norm, pinv, sigma_min, spectral_norm
from .system import Trajectory, reachability_stack

logger = logging.getLogger(__name__)

REL_TOL = 1e-10


def _random_directions(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Matrices (or vectors) of unit spectral norm along the last axes."""
    g = rng.standard_normal(shape)
    if len(shape) == 2:
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    return g / batch_spectral_norm(g)[:, None, None]


def perturbed_estimate(A, B, epsilon: float, rng: np.random.Generator):
    """(Abar, Bbar) at spectral distance exactly epsilon from (A, B)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    dA = rng.standard_normal(A.shape)
    dB = rng.standard_normal(B.shape)
    return A + epsilon * dA / spectral_norm(dA), B + epsilon * dB / spectral_norm(dB)


# ---------------------------------------------------------------------------
# Randomized inequality suites
# ---------------------------------------------------------------------------

@dataclass
class CertificationResult:
    name: str
    samples: int
    violations: int
    worst_slack: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _tally(name: str, lhs: np.ndarray, bound: np.ndarray) -> CertificationResult:
    lhs = np.asarray(lhs, dtype=float)
    bound = np.asarray(bound, dtype=float)
    slack = bound - lhs
    violations = int(np.count_nonzero(lhs > bound + REL_TOL * (1.0 + np.abs(bound))))
    return CertificationResult(name, int(lhs.size), violations, float(slack.min()))


def certify_product_bound(samples: int, rng: np.random.Generator, dim: int = 3) -> CertificationResult:
    M1 = rng.standard_normal((samples, dim, dim))
    N1 = rng.standard_normal((samples, dim, dim))
    dM = rng.uniform(0, 1, (samples, 1, 1)) * _random_directions(rng, (samples, dim, dim))
    dN = rng.uniform(0, 1, (samples, 1, 1)) * _random_directions(rng, (samples, dim, dim))
    lhs = batch_spectral_norm((M1 + dM) @ (N1 + dN) - M1 @ N1)
    ndM, ndN = batch_spectral_norm(dM), batch_spectral_norm(dN)
    bound = ndM * ndN + batch_spectral_norm(M1) * ndN + batch_spectral_norm(N1) * ndM
    return _tally("product", lhs, bound)


def certify_inverse_bound(samples: int, rng: np.random.Generator, dim: int = 3) -> CertificationResult:
    M1 = rng.standard_normal((samples, dim, dim)) + 2.0 * np.eye(dim)
    smin = batch_sigma_min(M1)
    keep = smin > 1e-3
    M1, smin = M1[keep], smin[keep]
    delta = rng.uniform(0, 0.99, smin.shape) * smin
    shrink = rng.uniform(0, 1, smin.shape)
    M2 = M1 + (delta * shrink)[:, None, None] * _random_directions(rng, M1.shape)
    inv1 = np.linalg.inv(M1)
    norm_inv1 = batch_spectral_norm(inv1)
    lhs = batch_spectral_norm(np.linalg.inv(M2) - inv1)
    bound = norm_inv1 ** 2 * delta / (1.0 - norm_inv1 * delta)
    return _tally("inverse", lhs, bound)


def certify_power_bound(samples: int, rng: np.random.Generator, dim: int = 3) -> CertificationResult:
    lhs = np.empty(samples)
    bound = np.empty(samples)
    for s in range(samples):
        M1 = rng.standard_normal((dim, dim))
        M1 *= rng.uniform(0, 1.5) / spectral_norm(M1)
        delta = rng.uniform(0, 1)
        i = int(rng.integers(1, 6))
        d = rng.standard_normal((dim, dim))
        M2 = M1 + rng.uniform(0, 1) * delta * d / spectral_norm(d)
        lhs[s] = spectral_norm(np.linalg.matrix_power(M2, i) - np.linalg.matrix_power(M1, i))
        bound[s] = q10(delta, i, M1)
    return _tally("power", lhs, bound)


def certify_power_product_bound(samples: int, rng: np.random.Generator, dim: int = 3, cols: int = 2) -> CertificationResult:
    lhs = np.empty(samples)
    bound = np.empty(samples)
    for s in range(samples):
        M1 = rng.standard_normal((dim, dim))
        M1 *= rng.uniform(0, 1.5) / spectral_norm(M1)
        N1 = rng.standard_normal((dim, cols))
        delta = rng.uniform(0, 1)
        i = int(rng.integers(0, 6))
        dM = rng.standard_normal((dim, dim))
        dN = rng.standard_normal((dim, cols))
        M2 = M1 + rng.uniform(0, 1) * delta * dM / spectral_norm(dM)
        N2 = N1 + rng.uniform(0, 1) * delta * dN / spectral_norm(dN)
        lhs[s] = spectral_norm(
            np.linalg.matrix_power(M2, i) @ N2 - np.linalg.matrix_power(M1, i) @ N1
        )
        bound[s] = q9(delta, i, M1, N1)
    return _tally("power_product", lhs, bound)


def certify_saturation_bounds(samples: int, rng: np.random.Generator, dim: int = 3) -> List[CertificationResult]:
    r = rng.uniform(0.1, 2.0, (samples, 1))
    x1 = rng.standard_normal((samples, dim)) * np.exp(rng.uniform(-2, 2, (samples, 1)))
    x2 = rng.standard_normal((samples, dim)) * np.exp(rng.uniform(-2, 2, (samples, 1)))
    s1 = sat_rows(x1, r)
    s2 = sat_rows(x2, r)
    gap = np.linalg.norm(s2 - s1, axis=1)
    nonexpansive = _tally("saturation_nonexpansive", gap, np.linalg.norm(x2 - x1, axis=1))

    n1 = np.linalg.norm(x1, axis=1)
    n2 = np.linalg.norm(x2, axis=1)
    both = (n1 > r[:, 0]) & (n2 > r[:, 0])
    directions = np.linalg.norm(x2[both] / n2[both, None] - x1[both] / n1[both, None], axis=1)
    saturated = _tally("saturation_both_active", gap[both], r[both, 0] * directions)
    return [nonexpansive, saturated]


def certify_direction_bound(samples: int, rng: np.random.Generator, rows: int = 4, cols: int = 2) -> CertificationResult:
    M1 = rng.standard_normal((samples, rows, cols))
    smin = batch_sigma_min(M1)
    keep = smin > 1e-3
    M1, smin = M1[keep], smin[keep]
    delta = rng.uniform(0, 0.99, smin.shape) * smin
    M2 = M1 + (delta * rng.uniform(0, 1, smin.shape))[:, None, None] * _random_directions(rng, M1.shape)
    x = rng.standard_normal((smin.size, cols, 1))
    y1 = (M1 @ x)[..., 0]
    y2 = (M2 @ x)[..., 0]
    lhs = np.linalg.norm(
        y2 / np.linalg.norm(y2, axis=1, keepdims=True) - y1 / np.linalg.norm(y1, axis=1, keepdims=True),
        axis=1,
    )
    return _tally("direction", lhs, 2.0 * delta / (smin - delta))


def _saturated_control_gap(A, B, kappa, A_bar, B_bar, x, r):
    g_true = deadbeat_gain(A, B, kappa)
    R_hat = reachability_stack(A_bar, B_bar, kappa)
    g_hat = pinv(R_hat) @ np.linalg.matrix_power(A_bar, kappa)
    u_hat = sat_rows(-(g_hat @ x[..., None])[..., 0], r)
    u_true = sat_rows(-x @ g_true.T, r)
    return np.linalg.norm(u_hat - u_true, axis=1)


def _ball_samples(A, B, radii, rng, x_scale):
    samples = radii.size
    A_bar = A + (radii * rng.uniform(0, 1, samples))[:, None, None] * _random_directions(rng, (samples,) + A.shape)
    B_bar = B + (radii * rng.uniform(0, 1, samples))[:, None, None] * _random_directions(rng, (samples,) + B.shape)
    directions = _random_directions(rng, (samples, A.shape[0]))
    x = directions * (x_scale * np.exp(rng.uniform(np.log(1e-3), np.log(1e3), (samples, 1))))
    return A_bar, B_bar, x


def certify_control_error(
    A, B, kappa: int, r: float, samples: int, rng: np.random.Generator, epsilon: Optional[float] = None
) -> CertificationResult:
    """Saturated CE control moves by at most q2(eps, r) inside the eps ball."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if epsilon is None:
        epsilon = critical_radius(kappa, A, B) / 4.0
    bound = q2(epsilon, r, kappa, A, B)
    x_scale = r / sigma_min(deadbeat_gain(A, B, kappa))
    A_bar, B_bar, x = _ball_samples(A, B, np.full(samples, epsilon), rng, x_scale)
    lhs = _saturated_control_gap(A, B, kappa, A_bar, B_bar, x, r)
    return _tally("control_error", lhs, np.full(samples, bound))


def certify_linear_control_bound(
    A, B, kappa: int, D: float, samples: int, rng: np.random.Generator
) -> CertificationResult:
    """|delta sat_D| <= M_q D eps for every eps in [0, m_q]."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    constants = lemma1_constants(kappa, A, B)
    eps = rng.uniform(0, constants.m_q, samples)
    x_scale = D / constants.sigma_min_g
    A_bar, B_bar, x = _ball_samples(A, B, eps, rng, x_scale)
    lhs = _saturated_control_gap(A, B, kappa, A_bar, B_bar, x, D)
    return _tally("linear_control_bound", lhs, constants.M_q * D * eps)


def run_certification_suite(
    A, B, kappa: int, D: float, samples: int, oracle_samples: int, rng: np.random.Generator
) -> List[CertificationResult]:
    results = [
        certify_product_bound(samples, rng),
        certify_inverse_bound(samples, rng),
        certify_power_bound(samples, rng),
        certify_power_product_bound(samples, rng),
        *certify_saturation_bounds(samples, rng),
        certify_direction_bound(samples, rng),
        certify_control_error(A, B, kappa, D, oracle_samples, rng),
        certify_linear_control_bound(A, B, kappa, D, oracle_samples, rng),
    ]
    for res in results:
        status = "ok" if res.passed else "VIOLATED"
        logger.info(f"  {res.name:<26} {res.samples:>7} samples  {res.violations} violations  [{status}]")
    return results


# ---------------------------------------------------------------------------
# One-step drift
# ---------------------------------------------------------------------------

@dataclass
class DriftReport:
    epsilon: float
    z_norms: np.ndarray
    inside: np.ndarray
    log_estimates: np.ndarray
    ci_halfwidths: np.ndarray
    log_bounds: np.ndarray
    violations: int

    @property
    def fraction_violating(self) -> float:
        return self.violations / max(len(self.z_norms), 1)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict:
        return {
            "epsilon": self.epsilon,
            "z_samples": int(len(self.z_norms)),
            "inside_drift_set": int(np.count_nonzero(self.inside)),
            "violations": self.violations,
            "fraction_violating": self.fraction_violating,
            "worst_slack": float(np.min(self.log_bounds - self.log_estimates + 3.0 * self.ci_halfwidths)),
        }


def in_drift_set(ctx: BoundContext, z) -> bool:
    """Membership in the closed set {z : |g(A, B) z| <= D}."""
    g = deadbeat_gain(ctx.plant.A, ctx.plant.B, ctx.plant.kappa)
    return bool(np.linalg.norm(g @ np.asarray(z, dtype=float)) <= ctx.D)


def _log_mean_exp_jackknife(norms: np.ndarray) -> Tuple[float, float]:
    N = norms.size
    top = norms.max()
    w = np.exp(norms - top)
    total = w.sum()
    estimate = logsumexp(norms) - math.log(N)
    loo = top + np.log(np.maximum(total - w, np.finfo(float).tiny) / (N - 1))
    var = (N - 1) / N * np.sum((loo - loo.mean()) ** 2)
    return float(estimate), float(1.96 * math.sqrt(var))


def verify_drift(
    ctx: BoundContext,
    epsilon: float,
    theta_perturbed,
    z_samples: int,
    inner_samples: int,
    rng: np.random.Generator,
    z_radius: Optional[float] = None,
    rates: Optional[DriftRates] = None,
    z_points: Optional[np.ndarray] = None,
) -> DriftReport:
    """Compare E[exp|Z_1| | Z_0 = z] against lambda e^{|z|} outside K and beta inside K.

    ``theta_perturbed`` is the frozen estimate [Abar, Bbar] the controller uses.
    ``rates`` overrides the computed drift rates (fault injection).
    """
    plant = ctx.plant
    theta = np.asarray(theta_perturbed, dtype=float)
    A_bar, B_bar = theta[:, : plant.n], theta[:, plant.n:]
    if epsilon > ctx.m_q:
        raise InadmissibleEpsilonError(f"epsilon = {epsilon:.6g} exceeds m_q = {ctx.m_q:.6g}")
    slack = 1e-12 * (1.0 + epsilon)
    if spectral_norm(A_bar - plant.A) > epsilon + slack or spectral_norm(B_bar - plant.B) > epsilon + slack:
        raise ValueError("perturbed estimate lies outside the epsilon ball around the truth")
    rates = rates if rates is not None else drift_rates(ctx, epsilon)
    if inner_samples < 2:
        raise ValueError("need at least two inner samples")

    g_true = deadbeat_gain(plant.A, plant.B, plant.kappa)
    g_hat = deadbeat_gain(A_bar, B_bar, plant.kappa)
    if z_points is None:
        radius = z_radius if z_radius is not None else 4.0 * ctx.D / ctx.sigma_min_g
        z_points = _random_directions(rng, (z_samples, plant.n)) * rng.uniform(0, radius, (z_samples, 1))
    z_points = np.atleast_2d(np.asarray(z_points, dtype=float))

    kappa = plant.kappa
    sub = ctx.sub
    count = z_points.shape[0]
    log_est = np.empty(count)
    ci = np.empty(count)
    inside = np.linalg.norm(z_points @ g_true.T, axis=1) <= ctx.D
    for idx, z in enumerate(z_points):
        ce = -(g_hat @ z)
        norm_ce = np.linalg.norm(ce)
        if norm_ce > ctx.D:
            ce *= ctx.D / norm_ce
        mean_part = sub.A_pow_kappa @ z + sub.R_star @ ce
        v = plant.excitation.sample_many(rng, inner_samples * kappa).reshape(inner_samples, -1)
        w = plant.disturbance.sample_many(rng, inner_samples * kappa).reshape(inner_samples, -1)
        nxt = mean_part + v @ sub.R_star.T + w @ sub.W_stack_map.T
        norms = np.linalg.norm(nxt, axis=1)
        if not np.all(np.isfinite(norms)):
            raise MonteCarloError("non-finite drift sample; increase inner samples")
        log_est[idx], ci[idx] = _log_mean_exp_jackknife(norms)
        if not (np.isfinite(log_est[idx]) and np.isfinite(ci[idx])):
            raise MonteCarloError("drift estimate is not finite; increase inner samples")

    z_norms = np.linalg.norm(z_points, axis=1)
    log_bounds = np.where(inside, rates.log_beta, rates.log_lam + z_norms)
    violations = int(np.count_nonzero(log_est - 3.0 * ci > log_bounds + 1e-9))
    logger.info(
        f"drift check eps={epsilon:.4g}: {count} points ({int(inside.sum())} inside K), "
        f"{violations} violations"
    )
    return DriftReport(float(epsilon), z_norms, inside, log_est, ci, log_bounds, violations)


# ---------------------------------------------------------------------------
# Coverage of the probabilistic bounds
# ---------------------------------------------------------------------------

@dataclass
class CoverageReport:
    label: str
    trials: int
    successes: int
    target_probability: float
    per_trial_margin: List[float]
    per_check: Dict[str, float] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def passed(self) -> bool:
        return self.fraction >= self.target_probability

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["fraction"] = self.fraction
        return out


def coverage_estimation_bound(
    ctx: BoundContext,
    delta: float,
    trials: int,
    horizon: int,
    master_seed: int,
    workers: int = 1,
    progress: bool = False,
) -> CoverageReport:
    """Fraction of trials with |theta_hat_T - theta_*| <= e(T) for every T in [T0, horizon]."""
    plant = ctx.plant
    T0 = burn_in_T0(ctx, delta, plant.x0)
    if horizon < T0:
        raise ValueError(f"horizon {horizon} is shorter than the burn-in time T0 = {T0}")
    T = np.arange(T0, horizon + 1)
    envelope = estimation_error_curve(ctx, T, delta, plant.x0)
    trajectories = run_trials(plant, "adaptive", horizon, master_seed, trials, workers, progress, "coverage")

    margins: List[float] = []
    flags: List[str] = []
    for idx, traj in enumerate(trajectories):
        path = ols_path(traj.states, traj.controls)
        errors = batch_spectral_norm(path[T - 1] - plant.theta_star)
        margins.append(float(np.min(envelope - errors)))
        Z = traj.covariates()
        if np.linalg.matrix_rank(Z.T @ Z) < ctx.dim_z:
            flags.append(f"trial {idx}: covariates not excited (rank-deficient Gram)")
    successes = sum(m >= 0.0 for m in margins)
    logger.info(f"estimation-bound coverage: {successes}/{trials} (T0 = {T0}, horizon = {horizon})")
    return CoverageReport(
        label="estimation_error_bound",
        trials=trials,
        successes=successes,
        target_probability=1.0 - delta,
        per_trial_margin=margins,
        per_check={"T0": float(T0)},
        flags=flags,
    )


def coverage_theorem2(
    ctx: BoundContext,
    epsilon: float,
    delta: float,
    trials: int,
    tau_checks: Sequence[int],
    master_seed: int,
    workers: int = 1,
    progress: bool = False,
) -> CoverageReport:
    """Fraction of trials with |Xbar_tau| below the stability envelope at each checked tau."""
    plant = ctx.plant
    taus = np.array(sorted(set(int(t) for t in tau_checks)))
    if taus.size == 0 or taus[0] < 0:
        raise ValueError("tau_checks must be a nonempty set of nonnegative integers")
    envelope = np.atleast_1d(theorem2_envelope(ctx, epsilon, delta, plant.x0, taus))
    flags: List[str] = []
    start = theorem2_envelope(ctx, epsilon, delta, plant.x0, 0)
    if start <= np.linalg.norm(plant.x0):
        flags.append("envelope at tau=0 does not exceed |x0|")

    horizon = max(int(taus[-1]) * plant.kappa, plant.kappa)
    trajectories = run_trials(plant, "adaptive", horizon, master_seed, trials, workers, progress, "envelope")
    observed = np.array([np.linalg.norm(t.states[taus * plant.kappa], axis=1) for t in trajectories])
    ok = observed < envelope[None, :]
    margins = (envelope[None, :] - observed).min(axis=1)
    per_check = {f"tau={tau}": float(ok[:, j].mean()) for j, tau in enumerate(taus)}
    successes = int(np.count_nonzero(ok.all(axis=1)))
    logger.info(f"envelope coverage: {successes}/{trials} at tau in {taus.tolist()}")
    return CoverageReport(
        label="stability_envelope",
        trials=trials,
        successes=successes,
        target_probability=1.0 - delta,
        per_trial_margin=[float(m) for m in margins],
        per_check=per_check,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Small-ball proxy
# ---------------------------------------------------------------------------

@dataclass
class BmsbProxy:
    p_hat: float
    k: int
    zeta_samples: int
    blocks: int
    label: str = "proxy"


def bmsb_proxy_from_covariates(
    covariates: Sequence[np.ndarray],
    k: int,
    gamma_sb,
    zeta_samples: int,
    rng: np.random.Generator,
) -> BmsbProxy:
    """Unconditional small-ball frequency, minimized over random unit directions."""
    gamma = np.atleast_2d(np.asarray(gamma_sb, dtype=float))
    d = gamma.shape[0]
    arrays = [np.asarray(z, dtype=float).reshape(len(z), d) for z in covariates]
    if not arrays or any(a.shape[0] < k + 1 for a in arrays):
        raise ValueError(f"every covariate sequence needs at least k+1 = {k + 1} points")
    zeta = _random_directions(rng, (zeta_samples, d))
    thresholds = np.sqrt(np.einsum("si,ij,sj->s", zeta, gamma, zeta))
    totals = np.zeros(zeta_samples)
    blocks = 0
    for Z in arrays:
        hits = (np.abs(Z @ zeta.T) >= thresholds).astype(float)
        csum = np.vstack([np.zeros((1, zeta_samples)), np.cumsum(hits, axis=0)])
        block_means = (csum[k:] - csum[:-k]) / k
        totals += block_means.sum(axis=0)
        blocks += block_means.shape[0]
    p_hat = float((totals / blocks).min())
    return BmsbProxy(p_hat=p_hat, k=k, zeta_samples=zeta_samples, blocks=blocks)


def bmsb_proxy(
    trajectories: Sequence[Trajectory],
    k: int,
    gamma_sb,
    zeta_samples: int,
    rng: np.random.Generator,
) -> BmsbProxy:
    if not trajectories:
        raise ValueError("bmsb_proxy needs at least one trajectory")
    return bmsb_proxy_from_covariates([t.covariates() for t in trajectories], k, gamma_sb, zeta_samples, rng)
