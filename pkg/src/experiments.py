"""Monte Carlo harness: batches of closed-loop trials and percentile series.

Each trial draws from its own ``SeedSequence(master_seed, spawn_key=(i,))``,
so any single trial can be replayed in isolation and results do not depend
on the number of worker processes.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .bounds import BmsbParams
from .controller import run_algorithm1, run_uncontrolled
from .system import NoiseSpec, PlantConfig, Trajectory

logger = logging.getLogger(__name__)

MODES = ("adaptive", "frozen_truth", "uncontrolled")
DEFAULT_X0_SET = ((0.0, 0.0), (5.0, 5.0), (20.0, 0.0), (0.0, -50.0))


def trial_seed(master_seed: int, trial_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(trial_index),))


def _prepare_plant(plant: PlantConfig, mode: str) -> PlantConfig:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "frozen_truth":
        return replace(plant, A0_bar=plant.A.copy(), B0_bar=plant.B.copy(), learn=False)
    return plant


def run_trial(plant: PlantConfig, mode: str, horizon: int, seed) -> Trajectory:
    """One trajectory of ``horizon`` raw steps."""
    plant = _prepare_plant(plant, mode)
    if mode == "uncontrolled":
        return run_uncontrolled(plant, horizon, seed)
    traj = run_algorithm1(plant, math.ceil(horizon / plant.kappa), seed)
    if traj.horizon == horizon:
        return traj
    return Trajectory(
        states=traj.states[: horizon + 1],
        controls=traj.controls[:horizon],
        excitations=traj.excitations[:horizon],
        disturbances=traj.disturbances[:horizon],
        estimates=traj.estimates,
    )


def _trial_worker(args) -> Trajectory:
    plant, mode, horizon, master_seed, index = args
    return run_trial(plant, mode, horizon, trial_seed(master_seed, index))


def run_trials(
    plant: PlantConfig,
    mode: str,
    horizon: int,
    master_seed: int,
    trials: int,
    workers: int = 1,
    progress: bool = False,
    desc: str = "trials",
) -> List[Trajectory]:
    """Run ``trials`` independent trajectories, returned in trial-index order."""
    jobs = [(plant, mode, horizon, master_seed, i) for i in range(trials)]
    if workers > 1 and trials > 1:
        with Pool(processes=workers) as pool:
            results = list(tqdm(pool.imap(_trial_worker, jobs), total=trials, desc=desc, disable=not progress))
    else:
        results = [_trial_worker(job) for job in tqdm(jobs, desc=desc, disable=not progress)]
    return results


def percentile(values: Iterable[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q N)-th smallest value."""
    data = np.sort(np.asarray(list(values), dtype=float))
    if data.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    rank = max(1, math.ceil(q * data.size))
    return float(data[rank - 1])


def _percentile_columns(norms: np.ndarray, q: float) -> np.ndarray:
    """Nearest-rank percentile of every column of a (trials, times) array."""
    ordered = np.sort(norms, axis=0)
    rank = max(1, math.ceil(q * ordered.shape[0]))
    return ordered[rank - 1]


@dataclass
class PercentileSeries:
    times: np.ndarray
    median: np.ndarray
    p90: np.ndarray

    @classmethod
    def from_norms(cls, norms: np.ndarray) -> "PercentileSeries":
        norms = np.atleast_2d(norms)
        return cls(
            times=np.arange(norms.shape[1]),
            median=_percentile_columns(norms, 0.5),
            p90=_percentile_columns(norms, 0.9),
        )

    def at(self, t: int) -> float:
        return float(self.median[t])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "median": self.median, "p90": self.p90})


@dataclass
class ExperimentConfig:
    plant: PlantConfig
    trials: int = 100
    horizon: int = 1000
    master_seed: int = 0
    mode: str = "adaptive"
    bmsb: Optional[BmsbParams] = None
    output_dir: Optional[Path] = None
    formats: Sequence[str] = ("csv",)
    workers: int = 1
    label: str = "experiment"
    raw: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.horizon < self.plant.kappa:
            raise ValueError(f"horizon must be >= kappa = {self.plant.kappa}, got {self.horizon}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    series: PercentileSeries
    trajectories: List[Trajectory]

    def max_control_norm(self) -> float:
        return max(float(np.linalg.norm(t.controls, axis=1).max(initial=0.0)) for t in self.trajectories)


def run_experiment(config: ExperimentConfig, progress: bool = False) -> ExperimentResult:
    logger.info(
        f"running {config.trials} {config.mode} trials of {config.horizon} steps "
        f"(seed {config.master_seed}, workers {config.workers})"
    )
    trajectories = run_trials(
        config.plant,
        config.mode,
        config.horizon,
        config.master_seed,
        config.trials,
        config.workers,
        progress,
        config.label,
    )
    norms = np.vstack([t.state_norms() for t in trajectories])
    return ExperimentResult(config, PercentileSeries.from_norms(norms), trajectories)


def _write_table(frame: pd.DataFrame, stem: Path, formats: Sequence[str]) -> None:
    if "csv" in formats:
        frame.to_csv(stem.with_suffix(".csv"), index=False)
    if "parquet" in formats:
        frame.to_parquet(stem.with_suffix(".parquet"), index=False)


def write_experiment(result: ExperimentResult, output_dir: Path, manifest: Optional[Dict] = None) -> Path:
    """Write per-trial tables, the percentile series and a JSON manifest."""
    output_dir = Path(output_dir)
    trials_dir = output_dir / "trials"
    trials_dir.mkdir(parents=True, exist_ok=True)
    formats = result.config.formats
    for idx, traj in enumerate(result.trajectories):
        _write_table(traj.to_frame(), trials_dir / f"trial_{idx:04d}", formats)
    _write_table(result.series.to_frame(), output_dir / "series", formats)
    document = {
        "label": result.config.label,
        "mode": result.config.mode,
        "trials": result.config.trials,
        "horizon": result.config.horizon,
        "master_seed": result.config.master_seed,
        "config": result.config.raw,
    }
    document.update(manifest or {})
    path = output_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info(f"wrote {len(result.trajectories)} trials and series to {output_dir}")
    return path


def _rotation(angle: float, scale: float = 1.0) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return scale * np.array([[c, s], [-s, c]])


def benchmark_plant(
    index: int,
    sigma_w_scale: float = 1.0,
    x0: Sequence[float] = (0.0, 0.0),
    U_max: float = 1.0,
    C: float = 0.4,
    kappa: int = 2,
    initial_seed: int = 0,
) -> PlantConfig:
    """The three two-state benchmark systems.

    1: rotation by pi/4 with B = (0, 1)^T
    2: rotation by -pi/2 with B = (0.3, -0.5)^T
    3: rotation by pi/4 damped by 0.8 with B = (0.5, 0)^T

    The initial estimate is a standard normal draw fixed by ``initial_seed``.
    """
    systems = {
        1: (_rotation(math.pi / 4), [[0.0], [1.0]]),
        2: (_rotation(-math.pi / 2), [[0.3], [-0.5]]),
        3: (_rotation(math.pi / 4, 0.8), [[0.5], [0.0]]),
    }
    if index not in systems:
        raise ValueError(f"benchmark system must be 1, 2 or 3, got {index}")
    A, B = systems[index]
    rng = np.random.default_rng(initial_seed)
    return PlantConfig(
        A=A,
        B=np.array(B),
        kappa=kappa,
        disturbance=NoiseSpec.gaussian(sigma_w_scale * np.eye(2)),
        excitation=NoiseSpec.uniform_ball(1, C),
        U_max=U_max,
        C=C,
        x0=np.asarray(x0, dtype=float),
        A0_bar=rng.standard_normal((2, 2)),
        B0_bar=rng.standard_normal((2, 1)),
    )


def figure1_suite(
    seed: int,
    trials: int = 100,
    horizon: int = 1000,
    workers: int = 1,
    progress: bool = False,
    formats: Sequence[str] = ("csv",),
) -> Dict[str, ExperimentResult]:
    """Controlled benchmark systems 1-3 and uncontrolled system 1 with Sigma_W = I."""
    runs = {
        "system1": (benchmark_plant(1), "adaptive"),
        "system2": (benchmark_plant(2), "adaptive"),
        "system3": (benchmark_plant(3), "adaptive"),
        "uncontrolled": (benchmark_plant(1), "uncontrolled"),
    }
    results = {}
    for label, (plant, mode) in runs.items():
        cfg = ExperimentConfig(
            plant=plant, trials=trials, horizon=horizon, master_seed=seed,
            mode=mode, workers=workers, label=label, formats=formats,
        )
        results[label] = run_experiment(cfg, progress)
    return results


def figure2_suite(
    seed: int,
    x0_set: Sequence[Sequence[float]] = DEFAULT_X0_SET,
    trials: int = 100,
    horizon: int = 1000,
    sigma_w_scale: float = 0.1,
    workers: int = 1,
    progress: bool = False,
    formats: Sequence[str] = ("csv",),
) -> Dict[str, ExperimentResult]:
    """Benchmark system 1 with Sigma_W = 0.1 I from several initial states."""
    results = {}
    for x0 in x0_set:
        label = "x0=(" + ",".join(f"{v:g}" for v in x0) + ")"
        cfg = ExperimentConfig(
            plant=benchmark_plant(1, sigma_w_scale=sigma_w_scale, x0=x0),
            trials=trials, horizon=horizon, master_seed=seed,
            workers=workers, label=label, formats=formats,
        )
        results[label] = run_experiment(cfg, progress)
    return results


def summarize_figure1(series: Dict[str, PercentileSeries]) -> Dict[str, float]:
    """Boundedness and growth ratios read off the figure-1 series."""
    horizon = len(series["uncontrolled"].times) - 1
    half, tenth = horizon // 2, max(horizon // 10, 1)
    summary = {}
    for label in ("system1", "system2", "system3"):
        if label in series:
            s = series[label]
            summary[f"{label}_late_over_mid"] = s.at(horizon) / max(s.at(half), 1e-300)
    unc = series["uncontrolled"]
    summary["uncontrolled_late_over_early"] = unc.at(horizon) / max(unc.at(tenth), 1e-300)
    if "system1" in series:
        summary["uncontrolled_over_system1"] = unc.at(horizon) / max(series["system1"].at(horizon), 1e-300)
    return summary


def summarize_figure2(series: Dict[str, PercentileSeries]) -> Dict[str, float]:
    finals = {label: s.median[-1] for label, s in series.items()}
    spread = max(finals.values()) / max(min(finals.values()), 1e-300)
    return {"final_median_max_over_min": float(spread), **{f"final_median[{k}]": float(v) for k, v in finals.items()}}
