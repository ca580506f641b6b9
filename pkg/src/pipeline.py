"""Command-line pipeline for simulating and certifying the adaptive controller.

Steps:
1. simulate  - Monte Carlo trials of one configured plant (CSV + manifest)
2. figure1   - benchmark systems 1-3 and the uncontrolled baseline
3. figure2   - benchmark system 1 from several initial states
4. bounds    - every closed-form constant and envelope as a JSON report
5. check     - inequality suites, drift condition and bound self-consistency
6. diagnose  - coverage of the probabilistic bounds and the small-ball proxy

Usage:
    python -m src.pipeline simulate --config config.yaml --trials 100 --seed 7
    python -m src.pipeline bounds --config config_high_margin.yaml
    python -m src.pipeline check --config config.yaml --inject-fault

Exit status: 0 success, 1 invariant violation, 2 usage or config error,
3 a constant or envelope that cannot be evaluated for the configured plant.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from .bounds import (
    BoundContext,
    BoundError,
    DriftRates,
    InadmissibleEpsilonError,
    admissible_interval,
    build_bound_context,
    burn_in_T0,
    check_margin,
    default_epsilon,
    drift_rates,
    estimation_error_curve,
    lemma2_constants,
    stabilization_time,
    theorem1_constants,
    theorem1_envelope,
    theorem2_envelope,
    transient_constant,
    worst_case_log_moment,
)
from .diagnostics import (
    bmsb_proxy,
    coverage_estimation_bound,
    coverage_theorem2,
    perturbed_estimate,
    run_certification_suite,
    verify_drift,
)
from .experiments import (
    DEFAULT_X0_SET,
    ExperimentConfig,
    figure1_suite,
    figure2_suite,
    run_experiment,
    run_trials,
    summarize_figure1,
    summarize_figure2,
    write_experiment,
)
from .utils import ROOT, ConfigError, apply_overrides, load_config, parse_bmsb, parse_plant, save_json

STEPS = ("simulate", "figure1", "figure2", "bounds", "check", "diagnose")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
EXIT_BOUND_FAILURE = 3

load_dotenv(ROOT / ".env")
logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
logger = logging.getLogger(__name__)


class Pipeline:
    """Loads one config and runs the requested step against it."""

    def __init__(
        self,
        config_path: str,
        overrides: Optional[List[str]] = None,
        output_dir: Optional[str] = None,
        seed: Optional[int] = None,
        workers: Optional[int] = None,
    ):
        self.config_path = Path(config_path)
        self.config = apply_overrides(load_config(self.config_path), overrides or [])
        self.plant = parse_plant(self.config.get("plant"))
        self.bmsb = parse_bmsb(self.config.get("bmsb"), self.plant.n + self.plant.m)

        experiment = self.config.setdefault("experiment", {})
        if seed is not None:
            experiment["seed"] = seed
        self.seed = int(experiment.get("seed", 0))
        self.workers = int(workers or os.environ.get("ADAPTIVE_WORKERS") or experiment.get("workers", 1))
        self.progress = bool(self.config.get("progress", {}).get("enabled", True))

        out = output_dir or self.config.get("output", {}).get("directory", "outputs")
        self.output_dir = Path(out) if Path(out).is_absolute() else ROOT / out
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.formats = tuple(self.config.get("output", {}).get("formats", ["csv"]))

        log_cfg = self.config.get("logging", {})
        level = os.environ.get("ADAPTIVE_LOG_LEVEL", log_cfg.get("level", "INFO"))
        logging.getLogger().setLevel(level)
        self.file_handler: Optional[logging.FileHandler] = None
        if log_cfg.get("log_file", False):
            self.file_handler = logging.FileHandler(self.output_dir / "run.log")
            self.file_handler.setLevel(level)
            self.file_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
            logging.getLogger().addHandler(self.file_handler)

        logger.info(f"Pipeline initialized with config: {config_path} (seed {self.seed})")

    def close(self) -> None:
        """Detach and close the run log handler."""
        if self.file_handler is not None:
            logging.getLogger().removeHandler(self.file_handler)
            self.file_handler.close()
            self.file_handler = None

    def _banner(self, title: str) -> None:
        logger.info("=" * 60)
        logger.info(title)
        logger.info("=" * 60)

    def _section(self, name: str) -> Dict:
        return self.config.get(name) or {}

    def _bound_context(self) -> BoundContext:
        samples = int(self._section("bounds").get("mgf_samples", 1_000_000))
        return build_bound_context(self.plant, self.bmsb, np.random.default_rng(self.seed), samples)

    # ------------------------------------------------------------------ steps

    def simulate(self) -> int:
        self._banner("STEP: simulate")
        experiment = self._section("experiment")
        cfg = ExperimentConfig(
            plant=self.plant,
            trials=int(experiment.get("trials", 100)),
            horizon=int(experiment.get("horizon", 1000)),
            master_seed=self.seed,
            mode=experiment.get("mode", "adaptive"),
            bmsb=self.bmsb,
            output_dir=self.output_dir,
            formats=self.formats,
            workers=self.workers,
            label=experiment.get("label", "simulate"),
            raw=self.config,
        )
        result = run_experiment(cfg, self.progress)
        write_experiment(result, self.output_dir)
        violations = self._constraint_violations({cfg.label: result})
        return 1 if violations else 0

    def _constraint_violations(self, results) -> List[str]:
        violations = []
        for label, result in results.items():
            peak = result.max_control_norm()
            if peak > self.plant.U_max + 1e-12:
                violations.append(f"{label}: |U_t| reached {peak:.6g} > U_max = {self.plant.U_max}")
            if np.any(result.series.p90 < result.series.median):
                violations.append(f"{label}: p90 below median")
        for v in violations:
            logger.error(f"violation: {v}")
        return violations

    def _write_series(self, results, subdir: str) -> Dict[str, str]:
        paths = {}
        target = self.output_dir / subdir
        target.mkdir(parents=True, exist_ok=True)
        for label, result in results.items():
            path = target / f"series_{label}.csv"
            result.series.to_frame().to_csv(path, index=False)
            paths[label] = str(path.relative_to(self.output_dir))
        return paths

    def figure1(self) -> int:
        self._banner("STEP: figure 1 (varying systems, uncontrolled baseline)")
        figures = self._section("figures")
        results = figure1_suite(
            self.seed,
            trials=int(figures.get("trials", 100)),
            horizon=int(figures.get("horizon", 1000)),
            workers=self.workers,
            progress=self.progress,
        )
        summary = summarize_figure1({k: r.series for k, r in results.items()})
        for key, value in summary.items():
            logger.info(f"  {key}: {value:.3f}")
        violations = self._constraint_violations(results)
        save_json(self.output_dir / "figure1" / "summary.json", {
            "seed": self.seed, "series": self._write_series(results, "figure1"),
            "summary": summary, "violations": violations,
        })
        return 1 if violations else 0

    def figure2(self) -> int:
        self._banner("STEP: figure 2 (varying initial state)")
        figures = self._section("figures")
        results = figure2_suite(
            self.seed,
            x0_set=[tuple(x) for x in figures.get("x0_set", DEFAULT_X0_SET)],
            trials=int(figures.get("trials", 100)),
            horizon=int(figures.get("horizon", 1000)),
            sigma_w_scale=float(figures.get("sigma_w_scale", 0.1)),
            workers=self.workers,
            progress=self.progress,
        )
        summary = summarize_figure2({k: r.series for k, r in results.items()})
        logger.info(f"  final median spread (max/min): {summary['final_median_max_over_min']:.3f}")
        violations = self._constraint_violations(results)
        save_json(self.output_dir / "figure2" / "summary.json", {
            "seed": self.seed, "series": self._write_series(results, "figure2"),
            "summary": summary, "violations": violations,
        })
        return 1 if violations else 0

    def bounds(self) -> int:
        self._banner("STEP: bounds")
        section = self._section("bounds")
        ctx = self._bound_context()
        x0 = self.plant.x0
        margin = check_margin(ctx)
        interval = admissible_interval(ctx)
        report = {
            "q1": ctx.q1,
            "m_q": ctx.m_q,
            "M_q": ctx.M_q,
            "norm_R_star": ctx.sub.norm_R,
            "norm_R_star_pinv": ctx.sub.norm_R_pinv,
            "M_V_bar": {"estimate": ctx.M_V_bar, "ci_halfwidth": ctx.M_V_bar_ci},
            "M_W_bar": {"estimate": ctx.M_W_bar, "ci_halfwidth": ctx.M_W_bar_ci},
            "margin": {"satisfied": margin.satisfied, "lhs": margin.lhs, "rhs": margin.rhs},
            "admissible": interval is not None,
            "admissible_interval": list(interval) if interval else None,
            "drift_at_zero": self._rates_dict(drift_rates(ctx, 0.0)),
        }
        deltas = [float(d) for d in section.get("deltas", [0.2, 0.05])]
        taus = [int(t) for t in section.get("taus", [0, 10, 100, 1000])]
        report["worst_case_log_moment"] = {str(t): worst_case_log_moment(ctx, x0, t) for t in taus}

        if self.bmsb is None:
            logger.warning("no bmsb section: skipping estimation and envelope constants")
            report["bmsb"] = None
        else:
            report["bmsb"] = {"k": self.bmsb.k, "p": self.bmsb.p, "gamma_sb": self.bmsb.gamma_sb}
            report["T0"] = {str(d): burn_in_T0(ctx, d, x0) for d in deltas}
            report["estimation_error"] = {
                str(d): {str(T): estimation_error_curve(ctx, T, d, x0) for T in (10 ** 3, 10 ** 4, 10 ** 5)}
                for d in deltas
            }
            if interval is not None:
                epsilon = section.get("epsilon")
                epsilon = float(epsilon) if epsilon is not None else default_epsilon(ctx)
                report.update(self._envelope_report(ctx, epsilon, deltas, taus))
            else:
                logger.warning(
                    f"margin condition fails: {margin.lhs:.4f} <= {margin.rhs:.4f}; report only"
                )
        path = save_json(self.output_dir / "bounds.json", report)
        logger.info(f"bounds report written to {path}")
        return 0

    @staticmethod
    def _rates_dict(rates: DriftRates) -> Dict:
        return {"epsilon": rates.epsilon, "lambda": rates.lam, "beta": rates.beta,
                "log_lambda": rates.log_lam, "log_beta": rates.log_beta}

    def _envelope_report(self, ctx: BoundContext, epsilon: float, deltas, taus) -> Dict:
        x0 = self.plant.x0
        t1 = theorem1_constants(ctx, x0, epsilon)
        lemma2 = lemma2_constants(ctx, epsilon)
        return {
            "epsilon": epsilon,
            "drift": self._rates_dict(drift_rates(ctx, epsilon)),
            "lemma2": {"L1": lemma2.L1, "L2_x0": lemma2.L2(x0), "L3": lemma2.L3, "L5": lemma2.L5},
            "tau0_prime": {str(d): stabilization_time(ctx, epsilon, d, x0) for d in deltas},
            "log_K": {str(d): transient_constant(ctx, epsilon, d / 2.0, x0) for d in deltas},
            "theorem1": {"N1": t1.N1, "log_N2_x0": t1.log_N2_x0, "N3": t1.N3, "lambda": t1.lam},
            "envelope_theorem2": {
                str(d): {str(t): theorem2_envelope(ctx, epsilon, d, x0, t) for t in taus} for d in deltas
            },
            "envelope_theorem1": {
                str(d): {str(t): theorem1_envelope(t1, d, t) for t in taus} for d in deltas
            },
        }

    def check(self, inject_fault: bool = False) -> int:
        self._banner("STEP: check")
        section = self._section("diagnostics")
        rng = np.random.default_rng(self.seed)
        plant = self.plant
        report: Dict = {"seed": self.seed, "inject_fault": inject_fault}
        violations: List[str] = []

        logger.info("Inequality suites")
        certs = run_certification_suite(
            plant.A, plant.B, plant.kappa, plant.D,
            int(section.get("certification_samples", 10_000)),
            int(section.get("oracle_samples", 100_000)),
            rng,
        )
        report["certification"] = [vars(c) for c in certs]
        violations += [f"{c.name}: {c.violations} violations" for c in certs if not c.passed]

        logger.info("Drift condition")
        ctx = self._bound_context()
        drift = {}
        for label, epsilon in (("frozen_truth", 0.0), ("perturbed", ctx.m_q / 2.0)):
            if epsilon > 0:
                theta = np.hstack(perturbed_estimate(plant.A, plant.B, epsilon, rng))
            else:
                theta = plant.theta_star
            rates = None
            if inject_fault:
                good = drift_rates(ctx, epsilon)
                rates = DriftRates(good.lam * 1e-6, good.beta * 1e-6, epsilon,
                                   good.log_lam + math.log(1e-6), good.log_beta + math.log(1e-6))
            res = verify_drift(
                ctx, epsilon, theta,
                int(section.get("z_samples", 50)), int(section.get("inner_samples", 10_000)), rng,
                z_radius=section.get("z_radius"), rates=rates,
            )
            drift[label] = res.to_dict()
            if not res.passed:
                violations.append(f"drift[{label}]: {res.violations} points above the bound")
        report["drift"] = drift

        if self.bmsb is not None and admissible_interval(ctx) is not None:
            logger.info("Bound self-consistency")
            consistency = self._consistency(ctx)
            report["consistency"] = consistency
            violations += consistency["violations"]

        report["violations"] = violations
        save_json(self.output_dir / "check.json", report)
        for v in violations:
            logger.error(f"violation: {v}")
        return 1 if violations else 0

    def _consistency(self, ctx: BoundContext) -> Dict:
        section = self._section("bounds")
        epsilon = section.get("epsilon")
        epsilon = float(epsilon) if epsilon is not None else default_epsilon(ctx)
        grid_x0 = section.get("x0_grid") or [self.plant.x0.tolist()]
        deltas = [float(d) for d in section.get("deltas", [0.2, 0.05])]
        taus = [int(t) for t in section.get("taus", [0, 10, 100, 1000])]
        lemma2 = lemma2_constants(ctx, epsilon)
        rates = drift_rates(ctx, epsilon)
        violations = []
        checked = 0
        for x0 in grid_x0:
            x0 = np.asarray(x0, dtype=float)
            t1 = theorem1_constants(ctx, x0, epsilon)
            if not math.isclose(t1.N3, rates.beta / (1.0 - rates.lam), rel_tol=1e-12):
                violations.append(f"N3 != beta/(1-lambda) at x0={x0.tolist()}")
            for delta in deltas:
                checked += 1
                tau0 = stabilization_time(ctx, epsilon, delta, x0)
                if tau0 > lemma2.bound(delta, x0):
                    violations.append(f"tau0'={tau0} above L2+L1 ln(1/delta) at delta={delta}, x0={x0.tolist()}")
                log_K = transient_constant(ctx, epsilon, delta / 2.0, x0)
                if log_K > t1.log_N2_x0 + t1.N1 * math.log(2.0 / delta) + 1e-9 * abs(log_K):
                    violations.append(f"K above N2 (2/delta)^N1 at delta={delta}, x0={x0.tolist()}")
                env2 = theorem2_envelope(ctx, epsilon, delta, x0, np.array(taus))
                env1 = theorem1_envelope(t1, delta, np.array(taus))
                if np.any(env1 < env2 - 1e-9 * np.abs(env2)):
                    violations.append(f"envelope ordering fails at delta={delta}, x0={x0.tolist()}")
        return {"epsilon": epsilon, "points": checked, "violations": violations}

    def diagnose(self) -> int:
        self._banner("STEP: diagnose")
        section = self._section("diagnostics")
        ctx = self._bound_context()
        delta = float(section.get("delta", 0.2))
        trials = int(section.get("trials", 50))
        report: Dict = {"seed": self.seed, "delta": delta}
        violations: List[str] = []

        if self.bmsb is None:
            logger.warning("no bmsb section: coverage suites skipped")
        else:
            T0 = burn_in_T0(ctx, delta, self.plant.x0)
            horizon = T0 + int(section.get("horizon_margin", 500))
            max_horizon = int(section.get("max_horizon", 50_000))
            if horizon > max_horizon:
                logger.warning(f"T0 = {T0} needs more than max_horizon = {max_horizon} steps; skipped")
                report["estimation_coverage"] = {"skipped": True, "T0": T0}
            else:
                cov = coverage_estimation_bound(ctx, delta, trials, horizon, self.seed, self.workers, self.progress)
                report["estimation_coverage"] = cov.to_dict()
                if not cov.passed:
                    violations.append(f"estimation coverage {cov.fraction:.3f} < {cov.target_probability:.3f}")

            try:
                epsilon = section.get("epsilon") or self._section("bounds").get("epsilon")
                epsilon = float(epsilon) if epsilon is not None else default_epsilon(ctx)
                tau_checks = self._tau_checks(ctx, epsilon, delta, section)
                env = coverage_theorem2(ctx, epsilon, delta, trials, tau_checks, self.seed, self.workers, self.progress)
                report["envelope_coverage"] = env.to_dict()
                if not env.passed:
                    violations.append(f"envelope coverage {env.fraction:.3f} < {env.target_probability:.3f}")
            except InadmissibleEpsilonError as exc:
                logger.warning(f"envelope coverage skipped: {exc}")
                report["envelope_coverage"] = {"skipped": True, "reason": str(exc)}

        proxy_trials = run_trials(
            self.plant, "adaptive", int(section.get("proxy_horizon", 1000)), self.seed,
            int(section.get("proxy_trials", 10)), self.workers, self.progress, "proxy",
        )
        gamma = self.bmsb.gamma_sb if self.bmsb else np.eye(self.plant.n + self.plant.m)
        k = self.bmsb.k if self.bmsb else 1
        proxy = bmsb_proxy(proxy_trials, k, gamma, int(section.get("zeta_samples", 200)),
                           np.random.default_rng(self.seed))
        report["bmsb_proxy"] = vars(proxy)
        logger.info(f"small-ball proxy p_hat = {proxy.p_hat:.4f} ({proxy.label})")

        report["violations"] = violations
        save_json(self.output_dir / "diagnose.json", report)
        for v in violations:
            logger.error(f"violation: {v}")
        return 1 if violations else 0

    def _tau_checks(self, ctx: BoundContext, epsilon: float, delta: float, section: Dict) -> List[int]:
        max_tau = int(section.get("max_tau", 5000))
        multiples = section.get("tau_multiples", [1, 2, 4])
        tau0 = stabilization_time(ctx, epsilon, delta / 2.0, self.plant.x0)
        if multiples and max(multiples) * tau0 <= max_tau:
            return [int(m * tau0) for m in multiples]
        checks = [int(t) for t in section.get("tau_checks", [0, 10, 100, 1000])]
        logger.warning(f"tau0' = {tau0} is beyond max_tau = {max_tau}; checking tau in {checks}")
        return checks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Simulate and certify the input-constrained adaptive controller")
    parser.add_argument('step', choices=STEPS, help='Pipeline step to run')
    parser.add_argument('--config', default='config.yaml', help='Path to configuration file (default: config.yaml)')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config value, e.g. --set plant.U_max=2')
    parser.add_argument('--trials', type=int, help='Number of Monte Carlo trials')
    parser.add_argument('--horizon', type=int, help='Horizon in raw steps')
    parser.add_argument('--mode', choices=['adaptive', 'frozen_truth', 'uncontrolled'], help='Controller mode')
    parser.add_argument('--seed', type=int, help='Master seed for all randomness')
    parser.add_argument('--workers', type=int, help='Worker processes for trial parallelism')
    parser.add_argument('--output-dir', help='Directory for reports and tables')
    parser.add_argument('--inject-fault', action='store_true', help='check: use a deliberately wrong drift rate')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    for key in ("trials", "horizon", "mode"):
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"experiment.{key}={value}")

    try:
        pipeline = Pipeline(args.config, overrides, args.output_dir, args.seed, args.workers)
    except (FileNotFoundError, ConfigError, ValueError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return 2

    try:
        if args.step == 'check':
            return pipeline.check(inject_fault=args.inject_fault)
        return getattr(pipeline, args.step)()
    except BoundError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_BOUND_FAILURE
    except (FileNotFoundError, ConfigError, ValueError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return 2
    finally:
        pipeline.close()


if __name__ == '__main__':
    sys.exit(main())
