"""Closed-form constants and envelopes for the adaptive closed loop.

Three groups live here:

* the perturbation chain ``q1 .. q10`` bounding how far the certainty
  equivalent gain moves when (A, B) is replaced by an estimate within an
  epsilon ball, and the derived ``(m_q, M_q)``;
* the drift rates ``lambda(eps)``, ``beta(eps)`` of the sub-sampled loop and
  the log-MGF constants of the aggregated noise that enter them;
* the estimation-error curve ``e(T, delta, x0)``, the burn-in and
  stabilization times, and the high-probability envelopes built on them.

Everything that can overflow is kept in log domain.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm as normal_dist

from .controller import deadbeat_gain
from .linalg import (
    as_matrix,
    logdet_spd,
    matrix_power,
    pinv,
    sigma_min,
    spectral_norm,
    sym_eig_bounds,
)
from .system import (
    NoiseSpec,
    NotReachableError,
    PlantConfig,
    SubsampledContext,
    build_subsampled_context,
    is_reachable,
    reachability_matrix,
)

logger = logging.getLogger(__name__)

# 3 * sum_{T >= 1} 1 / (T + 1)^2
UNION_CONSTANT = 3.0 * (math.pi ** 2 / 6.0 - 1.0)
BISECTION_RTOL = 1e-12
SCAN_CHUNK = 1_000_000


class BoundError(ValueError):
    """A constant or envelope cannot be evaluated for this plant."""


class EpsilonTooLargeError(BoundError):
    """Raised when epsilon is past the pole of the perturbation chain."""


class DegenerateBoundError(BoundError):
    pass


class InadmissibleEpsilonError(BoundError):
    pass


class MonteCarloError(BoundError):
    """Raised when a Monte Carlo estimate is not finite."""


# ---------------------------------------------------------------------------
# Perturbation chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ChainNorms:
    kappa: int
    power_norms: Tuple[float, ...]  # ||A^j|| for j = 0..kappa
    norm_A: float
    norm_B: float
    norm_R: float
    norm_R_pinv: float
    norm_RRt_inv: float
    sigma_min_RRt: float
    sigma_min_g: float


def _chain_norms(kappa: int, A, B) -> _ChainNorms:
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    reachable, smin = is_reachable(A, B, kappa)
    if not reachable:
        raise NotReachableError(f"(A, B) is not {kappa}-step reachable (sigma_min = {smin:.3e})")
    R = reachability_matrix(A, B, kappa)
    RRt = R @ R.T
    powers = [np.eye(A.shape[0])]
    for _ in range(kappa):
        powers.append(A @ powers[-1])
    return _ChainNorms(
        kappa=kappa,
        power_norms=tuple(spectral_norm(P) for P in powers),
        norm_A=spectral_norm(A),
        norm_B=spectral_norm(B),
        norm_R=spectral_norm(R),
        norm_R_pinv=spectral_norm(pinv(R)),
        norm_RRt_inv=spectral_norm(np.linalg.inv(RRt)),
        sigma_min_RRt=sigma_min(RRt),
        sigma_min_g=sigma_min(deadbeat_gain(A, B, kappa)),
    )


def _q10_norms(delta: float, i: int, power_norms: Sequence[float], norm_M: float) -> float:
    q = delta
    for j in range(2, i + 1):
        q = q * delta + power_norms[j - 1] * delta + norm_M * q
    return q


def _q9_norms(delta: float, i: int, power_norms: Sequence[float], norm_M: float, norm_N: float) -> float:
    if i == 0:
        return delta
    q = _q10_norms(delta, i, power_norms, norm_M)
    return q * delta + power_norms[i] * delta + norm_N * q


def q10(delta: float, i: int, M) -> float:
    """Bound on ||M2^i - M1^i|| for ||M2 - M1|| <= delta."""
    if i < 1:
        raise ValueError(f"q10 needs i >= 1, got {i}")
    M = as_matrix(M, "M")
    powers = [np.eye(M.shape[0])]
    for _ in range(i - 1):
        powers.append(M @ powers[-1])
    return _q10_norms(delta, i, [spectral_norm(P) for P in powers], spectral_norm(M))


def q9(delta: float, i: int, M, N) -> float:
    """Bound on ||M2^i N2 - M1^i N1|| for perturbations of size at most delta."""
    if i < 0:
        raise ValueError(f"q9 needs i >= 0, got {i}")
    M = as_matrix(M, "M")
    powers = [np.eye(M.shape[0])]
    for _ in range(i):
        powers.append(M @ powers[-1])
    return _q9_norms(delta, i, [spectral_norm(P) for P in powers], spectral_norm(M), spectral_norm(N))


@dataclass(frozen=True)
class PerturbChain:
    q5: float
    q6: float
    q7: float
    q8: float


def _reach_shift(eps: float, norms: _ChainNorms) -> float:
    return sum(
        _q9_norms(eps, i, norms.power_norms, norms.norm_A, norms.norm_B)
        for i in range(norms.kappa)
    )


def _q6_norms(eps: float, norms: _ChainNorms) -> float:
    s = _reach_shift(eps, norms)
    return s * s + 2.0 * norms.norm_R * s


def _chain_from_norms(eps: float, norms: _ChainNorms) -> PerturbChain:
    if eps < 0:
        raise ValueError(f"epsilon must be nonnegative, got {eps}")
    s = _reach_shift(eps, norms)
    q6 = s * s + 2.0 * norms.norm_R * s
    denom = 1.0 - norms.norm_RRt_inv * q6
    if denom <= 0.0:
        raise EpsilonTooLargeError(f"epsilon = {eps:.6g} is past the pole of the perturbation chain")
    q8 = norms.norm_RRt_inv ** 2 * q6 / denom
    q7 = s * q8 + norms.norm_R * q8 + norms.norm_RRt_inv * s
    q10k = _q10_norms(eps, norms.kappa, norms.power_norms, norms.norm_A)
    q5 = q7 * q10k + norms.norm_R_pinv * q10k + norms.power_norms[norms.kappa] * q7
    return PerturbChain(q5=q5, q6=q6, q7=q7, q8=q8)


def perturb_chain(epsilon: float, kappa: int, A, B) -> PerturbChain:
    return _chain_from_norms(epsilon, _chain_norms(kappa, A, B))


def _bisect_sup(pred: Callable[[float], bool], upper: Optional[float] = None) -> float:
    """sup{a : pred holds on [0, a]} for a predicate that fails past one threshold."""
    lo = 0.0
    if upper is None:
        hi = 1.0
        while pred(hi):
            lo, hi = hi, 2.0 * hi
            if hi > 1e12:
                raise DegenerateBoundError("no finite critical radius")
    else:
        hi = upper
    while hi - lo > BISECTION_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _q3_norms(norms: _ChainNorms) -> float:
    return _bisect_sup(lambda a: _q6_norms(a, norms) < norms.sigma_min_RRt)


def _q4_norms(norms: _ChainNorms, upper: Optional[float] = None) -> float:
    def pred(a: float) -> bool:
        try:
            return _chain_from_norms(a, norms).q5 < norms.sigma_min_g
        except EpsilonTooLargeError:
            return False

    return _bisect_sup(pred, upper=upper)


def q3(kappa: int, A, B) -> float:
    return _q3_norms(_chain_norms(kappa, A, B))


def q4(kappa: int, A, B) -> float:
    return _q4_norms(_chain_norms(kappa, A, B))


def _q1_norms(norms: _ChainNorms) -> float:
    if norms.sigma_min_g <= 0.0:
        raise DegenerateBoundError("deadbeat gain of the true system is rank deficient")
    r3 = _q3_norms(norms)
    # q4 capped at q3 is enough for the minimum
    value = min(r3, _q4_norms(norms, upper=r3))
    if value <= 0.0:
        raise DegenerateBoundError("no positive perturbation radius exists")
    return value


def q1(kappa: int, A, B) -> float:
    """Radius below which the perturbed gain stays well conditioned."""
    return _q1_norms(_chain_norms(kappa, A, B))


def q2(epsilon: float, r: float, kappa: int, A, B) -> float:
    """Bound on |sat_r(-g(A', B') x) - sat_r(-g(A, B) x)| for estimates within epsilon."""
    norms = _chain_norms(kappa, A, B)
    radius = _q1_norms(norms)
    if not 0.0 <= epsilon < radius:
        raise EpsilonTooLargeError(f"q2 needs 0 <= epsilon < q1 = {radius:.6g}, got {epsilon}")
    q5 = _chain_from_norms(epsilon, norms).q5
    return 2.0 * r * q5 / (norms.sigma_min_g - q5)


@dataclass(frozen=True)
class Lemma1Constants:
    q1: float
    m_q: float
    M_q: float
    sigma_min_g: float


def lemma1_constants(kappa: int, A, B) -> Lemma1Constants:
    """(m_q, M_q) such that |delta sat_D| <= M_q D eps for every eps <= m_q."""
    norms = _chain_norms(kappa, A, B)
    radius = _q1_norms(norms)
    m_q = radius / 2.0
    q5 = _chain_from_norms(m_q, norms).q5
    gap = norms.sigma_min_g - q5
    if gap <= 0.0:
        raise DegenerateBoundError("sigma_min(g) - q5(m_q) is not positive")
    return Lemma1Constants(q1=radius, m_q=m_q, M_q=4.0 * q5 / (radius * gap), sigma_min_g=norms.sigma_min_g)


# ---------------------------------------------------------------------------
# Noise constants and the bound context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MgfEstimate:
    estimate: float
    ci_halfwidth: float


def log_mgf_estimate(
    spec: NoiseSpec,
    map_,
    samples: int,
    rng: np.random.Generator,
    closed_form: bool = True,
    level: float = 0.95,
) -> MgfEstimate:
    """Monte Carlo estimate of ln E exp(|map @ [v_1; ...; v_k]|) for i.i.d. v_i ~ spec.

    The number of stacked draws ``k`` is ``map.shape[1] // spec.dim``.
    """
    if samples < 1000:
        raise ValueError(f"need at least 1000 samples, got {samples}")
    map_ = as_matrix(map_, "map")
    blocks, rem = divmod(map_.shape[1], spec.dim)
    if rem or blocks < 1:
        raise ValueError(f"map with {map_.shape[1]} columns does not stack {spec.dim}-dim draws")
    if spec.kind == "zero" or not np.any(map_):
        return MgfEstimate(0.0, 0.0)
    if closed_form and spec.kind == "uniform_ball" and map_.shape == (1, 1):
        a = abs(map_[0, 0]) * spec.bound
        return MgfEstimate(float(np.log(np.expm1(a) / a)) if a > 0 else 0.0, 0.0)

    draws = spec.sample_many(rng, samples * blocks).reshape(samples, blocks * spec.dim)
    norms = np.linalg.norm(draws @ map_.T, axis=1)
    if not np.all(np.isfinite(norms)):
        raise MonteCarloError("non-finite draws in log-MGF estimate")
    estimate = float(logsumexp(norms) - np.log(samples))
    weights = np.exp(norms - norms.max())
    z = normal_dist.ppf(0.5 + level / 2.0)
    ci = float(z * weights.std(ddof=1) / (np.sqrt(samples) * weights.mean()))
    if not (np.isfinite(estimate) and np.isfinite(ci)):
        raise MonteCarloError("log-MGF estimate is not finite; increase samples")
    return MgfEstimate(estimate, ci)


@dataclass(frozen=True, eq=False)
class BmsbParams:
    """Block martingale small-ball constants (k, Gamma_sb, p), supplied by the user."""

    k: int
    gamma_sb: np.ndarray
    p: float

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"BMSB block length k must be a positive integer, got {self.k}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"BMSB probability p must lie in (0, 1], got {self.p}")
        gamma = as_matrix(self.gamma_sb, "gamma_sb")
        logdet_spd(gamma)
        object.__setattr__(self, "gamma_sb", gamma)
        object.__setattr__(self, "k", int(self.k))


@dataclass(eq=False)
class BoundContext:
    plant: PlantConfig
    sub: SubsampledContext
    M_V_bar: float
    M_W_bar: float
    m_q: float
    M_q: float
    bmsb: Optional[BmsbParams]
    sigma_sq: float
    trace_Sigma_V: float
    trace_Sigma_W: float
    norm_B: float
    q1: float = 0.0
    sigma_min_g: float = 0.0
    M_V_bar_ci: float = 0.0
    M_W_bar_ci: float = 0.0

    @property
    def D(self) -> float:
        return self.plant.D

    @property
    def dim_z(self) -> int:
        return self.plant.n + self.plant.m

    def require_bmsb(self) -> BmsbParams:
        if self.bmsb is None:
            raise ValueError("BMSB parameters (k, gamma_sb, p) are required for this bound")
        return self.bmsb


def build_bound_context(
    cfg: PlantConfig,
    bmsb: Optional[BmsbParams] = None,
    rng: Optional[np.random.Generator] = None,
    mgf_samples: int = 1_000_000,
    M_V_bar: Optional[MgfEstimate] = None,
    M_W_bar: Optional[MgfEstimate] = None,
) -> BoundContext:
    """Derive every ground-truth constant the envelopes need."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sub = build_subsampled_context(cfg)
    lemma1 = lemma1_constants(cfg.kappa, cfg.A, cfg.B)
    if M_V_bar is None:
        M_V_bar = log_mgf_estimate(cfg.excitation, sub.R_star, mgf_samples, rng)
    if M_W_bar is None:
        M_W_bar = log_mgf_estimate(cfg.disturbance, sub.W_stack_map, mgf_samples, rng)
    logger.info(
        f"bound context: q1={lemma1.q1:.4g}, m_q={lemma1.m_q:.4g}, M_q={lemma1.M_q:.4g}, "
        f"M_Vbar={M_V_bar.estimate:.4f}+-{M_V_bar.ci_halfwidth:.1e}, "
        f"M_Wbar={M_W_bar.estimate:.4f}+-{M_W_bar.ci_halfwidth:.1e}"
    )
    return BoundContext(
        plant=cfg,
        sub=sub,
        M_V_bar=M_V_bar.estimate,
        M_W_bar=M_W_bar.estimate,
        m_q=lemma1.m_q,
        M_q=lemma1.M_q,
        bmsb=bmsb,
        sigma_sq=sym_eig_bounds(cfg.disturbance.covariance)[1],
        trace_Sigma_V=float(np.trace(cfg.excitation.covariance)),
        trace_Sigma_W=float(np.trace(cfg.disturbance.covariance)),
        norm_B=spectral_norm(cfg.B),
        q1=lemma1.q1,
        sigma_min_g=lemma1.sigma_min_g,
        M_V_bar_ci=M_V_bar.ci_halfwidth,
        M_W_bar_ci=M_W_bar.ci_halfwidth,
    )


@dataclass(frozen=True)
class MarginCheck:
    satisfied: bool
    lhs: float
    rhs: float


def check_margin(ctx: BoundContext) -> MarginCheck:
    """Saturation margin D / ||R_*^+|| against the noise constants M_Vbar + M_Wbar."""
    lhs = ctx.D / ctx.sub.norm_R_pinv
    rhs = ctx.M_V_bar + ctx.M_W_bar
    return MarginCheck(satisfied=lhs > rhs, lhs=lhs, rhs=rhs)


# ---------------------------------------------------------------------------
# Drift rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftRates:
    lam: float
    beta: float
    epsilon: float
    log_lam: float
    log_beta: float


def _log_rates(ctx: BoundContext, epsilon):
    growth = ctx.sub.norm_R * ctx.M_q * ctx.D * np.asarray(epsilon, dtype=float)
    log_beta = growth + ctx.M_V_bar + ctx.M_W_bar
    return log_beta - ctx.D / ctx.sub.norm_R_pinv, log_beta


def drift_rates(ctx: BoundContext, epsilon: float) -> DriftRates:
    if not 0.0 <= epsilon <= ctx.m_q:
        raise InadmissibleEpsilonError(f"epsilon must lie in [0, m_q = {ctx.m_q:.6g}], got {epsilon}")
    log_lam, log_beta = _log_rates(ctx, epsilon)
    return DriftRates(
        lam=float(np.exp(log_lam)),
        beta=float(np.exp(log_beta)),
        epsilon=float(epsilon),
        log_lam=float(log_lam),
        log_beta=float(log_beta),
    )


def admissible_interval(ctx: BoundContext) -> Optional[Tuple[float, float]]:
    """Open interval of epsilon with lambda(eps) < 1 and eps < m_q, or None."""
    margin = ctx.D / ctx.sub.norm_R_pinv - ctx.M_V_bar - ctx.M_W_bar
    if margin <= 0.0:
        return None
    threshold = margin / (ctx.sub.norm_R * ctx.M_q * ctx.D)
    return 0.0, min(ctx.m_q, threshold)


def default_epsilon(ctx: BoundContext) -> float:
    interval = admissible_interval(ctx)
    if interval is None:
        raise InadmissibleEpsilonError(
            "no admissible epsilon: D/||R_*^+|| <= M_Vbar + M_Wbar"
        )
    return 0.5 * interval[1]


def _require_admissible(ctx: BoundContext, epsilon: float) -> None:
    interval = admissible_interval(ctx)
    if interval is None:
        raise InadmissibleEpsilonError("no admissible epsilon: D/||R_*^+|| <= M_Vbar + M_Wbar")
    if not interval[0] < epsilon < interval[1]:
        raise InadmissibleEpsilonError(
            f"epsilon = {epsilon:.6g} outside the admissible interval (0, {interval[1]:.6g})"
        )


# ---------------------------------------------------------------------------
# Estimation error, burn-in and stabilization time
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _EstimationTerms:
    d: int
    K1: float
    K2: float
    K4: float
    K5: float
    log_f1: float
    logdet_gamma: float
    lam_min_gamma: float
    f2_const: float   # f2(x0, T) = f2_const + f2_slope * T^2
    f2_slope: float

    def log_c(self, T):
        T = np.asarray(T, dtype=float)
        return self.log_f1 + 2.0 * np.log1p(T) + np.log(self.f2_const + self.f2_slope * T ** 2)

    def convex_from(self) -> float:
        # -ln(f2) is convex past sqrt(f2_const / f2_slope).
        if self.f2_slope <= 0.0:
            return 1.0
        return max(1.0, math.sqrt(self.f2_const / self.f2_slope))

    def log_f3(self) -> float:
        return math.log(self.f2_const + self.f2_slope)


def _estimation_terms(ctx: BoundContext, delta: float, x0) -> _EstimationTerms:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    bmsb = ctx.require_bmsb()
    d = ctx.dim_z
    lam_min, lam_max = sym_eig_bounds(bmsb.gamma_sb)
    x0 = np.asarray(x0, dtype=float)
    control_energy = ctx.D ** 2 + ctx.trace_Sigma_V
    return _EstimationTerms(
        d=d,
        K1=10.0 * bmsb.k / bmsb.p ** 2,
        K2=2.0 * d * math.log(10.0 / bmsb.p),
        K4=90.0 * math.sqrt(ctx.sigma_sq) / bmsb.p,
        K5=ctx.plant.n + d * math.log(10.0 / bmsb.p),
        log_f1=math.log(UNION_CONSTANT / delta),
        logdet_gamma=logdet_spd(bmsb.gamma_sb),
        lam_min_gamma=lam_min,
        f2_const=4.0 * float(x0 @ x0) + 2.0 * control_energy + lam_max,
        f2_slope=4.0 * (ctx.norm_B ** 2 * control_energy + ctx.trace_Sigma_W),
    )


def estimation_error_curve(ctx: BoundContext, T, delta: float, x0):
    """e(T, delta, x0); ``T`` may be an integer or an array of integers."""
    terms = _estimation_terms(ctx, delta, x0)
    T_arr = np.asarray(T, dtype=float)
    if np.any(T_arr < 1):
        raise ValueError("T must be >= 1")
    inner = (
        terms.K5
        + terms.d * terms.log_c(T_arr)
        - terms.logdet_gamma
        + terms.log_f1
        + 2.0 * np.log1p(T_arr)
    )
    value = terms.K4 * np.sqrt(inner / (T_arr * terms.lam_min_gamma))
    return float(value) if np.ndim(value) == 0 else value


def _burn_in_slack(terms: _EstimationTerms):
    def slack(T):
        T = np.asarray(T, dtype=float)
        rhs = terms.K1 * (
            terms.K2 + terms.d * terms.log_c(T) - terms.logdet_gamma + terms.log_f1 + 2.0 * np.log1p(T)
        )
        return T - rhs

    return slack


def _error_tail_slack(terms: _EstimationTerms, epsilon: float, kappa: int):
    scale = epsilon ** 2 * terms.lam_min_gamma / terms.K4 ** 2

    def slack(i):
        T = kappa * np.asarray(i, dtype=float)
        inner = terms.K5 + terms.d * terms.log_c(T) - terms.logdet_gamma + terms.log_f1 + 2.0 * np.log1p(T)
        return T * scale - inner

    return slack


def _tangent_cap(K: float, f: float) -> float:
    """T >= K ln(T+1) + f holds for every T at or past this value."""
    if K <= 0.0:
        return max(1.0, 1.0 + 2.0 * f)
    return 2.0 * K * math.log(2.0 * K) - 2.0 * K + 1.0 + 2.0 * f


def _last_violation(slack, convex_from: float, cap: int) -> int:
    """Largest integer t in [1, cap] with slack(t) < 0, or 0 if there is none.

    ``slack`` must be convex on [convex_from, inf) and nonnegative from ``cap`` on.
    """
    cap = max(int(math.ceil(cap)), 1)
    last = 0
    dense_end = min(cap, max(int(math.ceil(convex_from)), 1))
    for start in range(1, dense_end + 1, SCAN_CHUNK):
        t = np.arange(start, min(start + SCAN_CHUNK, dense_end + 1))
        bad = np.nonzero(slack(t) < 0)[0]
        if bad.size:
            last = int(t[bad[-1]])
    if dense_end >= cap:
        return last

    lo, hi = dense_end, cap
    while hi - lo > 2:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        if slack(m1) <= slack(m2):
            hi = m2
        else:
            lo = m1
    window = np.arange(lo, hi + 1)
    t_min = int(window[np.argmin(slack(window))])
    if slack(t_min) >= 0:
        return last
    if slack(cap) < 0:
        raise DegenerateBoundError("sufficient cap does not satisfy its own condition")
    lo, hi = t_min, cap
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if slack(mid) < 0:
            lo = mid
        else:
            hi = mid
    return max(last, lo)


def _burn_in_cap(terms: _EstimationTerms) -> float:
    K3 = terms.K1 * (4 * terms.d + 2)
    f4 = terms.K1 * ((terms.d + 1) * terms.log_f1 + terms.K2 + terms.d * terms.log_f3() - terms.logdet_gamma)
    return _tangent_cap(K3, f4)


def burn_in_T0(ctx: BoundContext, delta: float, x0) -> int:
    """Smallest T0' such that the burn-in inequality holds for every T >= T0'."""
    terms = _estimation_terms(ctx, delta, x0)
    cap = _burn_in_cap(terms)
    last = _last_violation(_burn_in_slack(terms), terms.convex_from(), cap)
    return last + 1


def stabilization_time(ctx: BoundContext, epsilon: float, delta: float, x0) -> int:
    """First sub-sampled index past burn-in from which e(kappa i) <= epsilon for all i."""
    if not 0.0 < epsilon <= ctx.m_q:
        raise InadmissibleEpsilonError(f"epsilon must lie in (0, m_q = {ctx.m_q:.6g}], got {epsilon}")
    kappa = ctx.plant.kappa
    terms = _estimation_terms(ctx, delta, x0)
    T0 = burn_in_T0(ctx, delta, x0)
    if terms.K4 == 0.0:
        # noiseless plant: e(T) = 0 past burn-in
        return max(-(-T0 // kappa), 1)
    K6_prime = terms.K4 ** 2 / (epsilon ** 2 * terms.lam_min_gamma)
    f5 = K6_prime * (terms.K5 + (terms.d + 1) * terms.log_f1 + terms.d * terms.log_f3() - terms.logdet_gamma)
    cap_T = _tangent_cap(K6_prime * (4 * terms.d + 2), f5)
    cap_i = max(int(math.ceil(cap_T / kappa)), 1)
    last_i = _last_violation(
        _error_tail_slack(terms, epsilon, kappa), terms.convex_from() / kappa, cap_i
    )
    return max(-(-T0 // kappa), last_i + 1, 1)


@dataclass(frozen=True, eq=False)
class Lemma2Constants:
    """tau0'(eps, delta, x0) <= L2(x0) + L1 ln(1/delta)."""

    K1: float
    K2: float
    K3: float
    K4: float
    K5: float
    K6: float
    L1: float
    L3: float
    L5: float
    kappa: int
    k_max: float
    k_offset: float
    ctx: BoundContext = field(repr=False)

    def f3(self, x0) -> float:
        terms = _estimation_terms(self.ctx, 0.5, x0)
        return math.exp(terms.log_f3())

    def L4(self, x0) -> float:
        terms = _estimation_terms(self.ctx, 0.5, x0)
        d = terms.d
        inner = (d + 1) * math.log(UNION_CONSTANT) + d * terms.log_f3() - terms.logdet_gamma + self.k_offset
        return 2.0 * self.k_max * max(0.0, inner)

    def L2(self, x0) -> float:
        return (self.L3 + self.L4(x0)) / self.kappa

    def bound(self, delta: float, x0) -> float:
        return self.L2(x0) + self.L1 * math.log(1.0 / delta)


def lemma2_constants(ctx: BoundContext, epsilon: float) -> Lemma2Constants:
    if epsilon <= 0.0:
        raise InadmissibleEpsilonError(f"epsilon must be positive, got {epsilon}")
    terms = _estimation_terms(ctx, 0.5, np.zeros(ctx.plant.n))
    d = terms.d
    kappa = ctx.plant.kappa
    K3 = terms.K1 * (4 * d + 2)
    K6_prime = terms.K4 ** 2 / (epsilon ** 2 * terms.lam_min_gamma)
    K6 = K6_prime * (4 * d + 2)
    k_max = max(terms.K1, K6_prime)
    L3 = max(_tangent_cap(K3, 0.0), _tangent_cap(K6, 0.0)) + kappa
    L5 = 2.0 * k_max * (d + 1)
    return Lemma2Constants(
        K1=terms.K1,
        K2=terms.K2,
        K3=K3,
        K4=terms.K4,
        K5=terms.K5,
        K6=K6,
        L1=L5 / kappa,
        L3=L3,
        L5=L5,
        kappa=kappa,
        k_max=k_max,
        k_offset=max(terms.K2, terms.K5),
        ctx=ctx,
    )


# ---------------------------------------------------------------------------
# Envelopes
# ---------------------------------------------------------------------------

def _block_growth(ctx: BoundContext) -> float:
    return ctx.sub.norm_R * ctx.D + ctx.M_V_bar + ctx.M_W_bar


def transient_constant(ctx: BoundContext, epsilon: float, delta: float, x0) -> float:
    """ln K(eps, delta, x0)."""
    rates = drift_rates(ctx, epsilon)
    if rates.log_lam >= 0.0:
        raise InadmissibleEpsilonError(f"lambda({epsilon:.6g}) = {rates.lam:.6g} is not below 1")
    tau0 = stabilization_time(ctx, epsilon, delta, x0)
    return float(np.linalg.norm(x0)) + tau0 * (_block_growth(ctx) - rates.log_lam)


def theorem2_envelope(ctx: BoundContext, epsilon: float, delta: float, x0, tau):
    """High-probability bound on |Xbar_tau|, valid for all tau >= 0 jointly."""
    _require_admissible(ctx, epsilon)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rates = drift_rates(ctx, epsilon)
    log_K = transient_constant(ctx, epsilon, delta / 2.0, x0)
    tau = np.asarray(tau, dtype=float)
    value = math.log(2.0 / delta) + np.logaddexp(
        log_K + tau * rates.log_lam, rates.log_beta - math.log(-math.expm1(rates.log_lam))
    )
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class Theorem1Constants:
    N1: float
    log_N2_x0: float
    N3: float
    lam: float
    epsilon: float
    log_N3: float
    log_lam: float


def theorem1_constants(ctx: BoundContext, x0, epsilon: Optional[float] = None) -> Theorem1Constants:
    if epsilon is None:
        epsilon = default_epsilon(ctx)
    _require_admissible(ctx, epsilon)
    rates = drift_rates(ctx, epsilon)
    rate = _block_growth(ctx) - rates.log_lam
    lemma2 = lemma2_constants(ctx, epsilon)
    log_N3 = rates.log_beta - math.log(-math.expm1(rates.log_lam))
    return Theorem1Constants(
        N1=rate * lemma2.L1,
        log_N2_x0=float(np.linalg.norm(x0)) + rate * lemma2.L2(x0),
        N3=math.exp(log_N3),
        lam=rates.lam,
        epsilon=float(epsilon),
        log_N3=log_N3,
        log_lam=rates.log_lam,
    )


def theorem1_envelope(constants: Theorem1Constants, delta: float, tau):
    """ln(2/delta) + ln(N2 (2/delta)^N1 lambda^tau + N3)."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    log_2d = math.log(2.0 / delta)
    tau = np.asarray(tau, dtype=float)
    value = log_2d + np.logaddexp(
        constants.log_N2_x0 + constants.N1 * log_2d + tau * constants.log_lam, constants.log_N3
    )
    return float(value) if np.ndim(value) == 0 else value


def worst_case_log_moment(ctx: BoundContext, x0, tau):
    """ln of the crude moment bound e^{|x0|} (e^{||R_*|| D + M_Vbar + M_Wbar})^tau."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be nonnegative")
    value = float(np.linalg.norm(x0)) + np.asarray(tau, dtype=float) * _block_growth(ctx)
    return float(value) if np.ndim(value) == 0 else value


def prop4_envelope(
    ctx: BoundContext,
    h: Sequence[float],
    tau0: int,
    tau: int,
    gamma: float,
    log_moment_tau0: float,
) -> float:
    """Bound on |Xbar_tau| holding with probability 1 - gamma for a schedule h of epsilons."""
    if tau <= tau0:
        raise ValueError(f"need tau > tau0, got tau={tau}, tau0={tau0}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    h = np.asarray(h, dtype=float)
    if h.shape != (tau - tau0,):
        raise ValueError(f"h must have {tau - tau0} entries, got {h.shape}")
    if np.any(h < 0.0) or np.any(h > ctx.m_q):
        raise InadmissibleEpsilonError(f"every h(i) must lie in [0, m_q = {ctx.m_q:.6g}]")
    log_lam, log_beta = _log_rates(ctx, h)
    # Sum of log lambda over j > i for each i.
    tail = np.concatenate([np.cumsum(log_lam[::-1])[::-1][1:], [0.0]])
    terms = np.concatenate([[log_moment_tau0 + log_lam.sum()], log_beta + tail])
    return float(-math.log(gamma) + logsumexp(terms))
