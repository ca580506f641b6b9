"""Adaptive stabilization of input-constrained stochastic linear systems."""

__all__ = ["linalg", "system", "controller", "estimator", "bounds", "diagnostics", "experiments", "pipeline", "utils"]
