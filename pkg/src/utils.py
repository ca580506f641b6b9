"""Config loading, overrides and report writing."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import yaml

from .bounds import BmsbParams
from .system import NoiseSpec, PlantConfig

ROOT = Path(__file__).resolve().parents[1]


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def load_config(path) -> Dict[str, Any]:
    """Read a YAML (or JSON) config file into a dict."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return data


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _matrix(value, name: str, dim: Optional[int] = None) -> np.ndarray:
    """Nested list, or a scalar meaning ``value * I`` when ``dim`` is known."""
    if value is None:
        raise ConfigError(f"missing matrix {name!r}")
    if np.isscalar(value):
        if dim is None:
            raise ConfigError(f"{name!r} must be a matrix")
        return float(value) * np.eye(dim)
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name!r} is not a numeric matrix") from exc
    if arr.ndim != 2:
        raise ConfigError(f"{name!r} must be a 2-D nested list, got shape {arr.shape}")
    return arr


def parse_noise(section: Optional[Dict[str, Any]], dim: int, default_bound: Optional[float] = None) -> NoiseSpec:
    section = section or {"kind": "zero"}
    kind = section.get("kind", "gaussian")
    if kind == "zero":
        return NoiseSpec.zero(dim)
    if kind == "uniform_ball":
        bound = section.get("bound", default_bound)
        if bound is None:
            raise ConfigError("uniform_ball noise needs a bound")
        return NoiseSpec.uniform_ball(dim, float(bound))
    if kind == "gaussian":
        if "covariance" in section:
            cov = _matrix(section["covariance"], "covariance", dim)
        else:
            cov = float(section.get("scale", 1.0)) * np.eye(dim)
        return NoiseSpec.gaussian(cov)
    raise ConfigError(f"unknown noise kind {kind!r}")


def parse_plant(section: Dict[str, Any]) -> PlantConfig:
    if not section:
        raise ConfigError("config has no 'plant' section")
    try:
        A = _matrix(section.get("A"), "A")
        B = _matrix(section.get("B"), "B")
        n, m = B.shape
        C = float(section["C"])
        initial = section.get("initial_estimate") or {"random": True, "seed": 0}
        if initial.get("random"):
            rng = np.random.default_rng(int(initial.get("seed", 0)))
            A0, B0 = rng.standard_normal((n, n)), rng.standard_normal((n, m))
        else:
            A0 = _matrix(initial.get("A"), "initial_estimate.A")
            B0 = _matrix(initial.get("B"), "initial_estimate.B")
        return PlantConfig(
            A=A,
            B=B,
            kappa=int(section.get("kappa", n)),
            disturbance=parse_noise(section.get("disturbance"), n),
            excitation=parse_noise(section.get("excitation", {"kind": "uniform_ball"}), m, default_bound=C),
            U_max=float(section["U_max"]),
            C=C,
            x0=np.asarray(section.get("x0", [0.0] * n), dtype=float),
            A0_bar=A0,
            B0_bar=B0,
            learn=bool(section.get("learn", True)),
        )
    except KeyError as exc:
        raise ConfigError(f"plant section is missing {exc}") from exc
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid plant: {exc}") from exc


def parse_bmsb(section: Optional[Dict[str, Any]], dim: int) -> Optional[BmsbParams]:
    if not section:
        return None
    try:
        return BmsbParams(
            k=int(section.get("k", 1)),
            gamma_sb=_matrix(section.get("gamma_sb", 1.0), "gamma_sb", dim),
            p=float(section["p"]),
        )
    except KeyError as exc:
        raise ConfigError(f"bmsb section is missing {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid bmsb parameters: {exc}") from exc


def to_jsonable(obj: Any) -> Any:
    """Convert numpy values to plain Python; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def emit_report(report: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(report), indent=2, sort_keys=True)


def save_json(path: Path, report: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(emit_report(report) + "\n")
    return path
