import math

import numpy as np
import pytest

from src.bounds import BmsbParams, MgfEstimate, build_bound_context
from src.experiments import benchmark_plant
from src.system import NoiseSpec, PlantConfig

C45 = math.cos(math.pi / 4)
ROTATION = np.array([[C45, C45], [-C45, C45]])


@pytest.fixture
def system1():
    return benchmark_plant(1)


@pytest.fixture
def high_margin_plant():
    """System 1 with Sigma_W = 0.01 I and U_max = 3: D / |R^+| is about 1.5."""
    return PlantConfig(
        A=ROTATION,
        B=np.array([[0.0], [1.0]]),
        kappa=2,
        disturbance=NoiseSpec.gaussian(0.01 * np.eye(2)),
        excitation=NoiseSpec.uniform_ball(1, 0.2),
        U_max=3.0,
        C=0.2,
        x0=np.array([1.0, 1.0]),
    )


@pytest.fixture
def bmsb():
    return BmsbParams(k=1, gamma_sb=0.01 * np.eye(3), p=1.0)


@pytest.fixture
def ctx(high_margin_plant, bmsb):
    """Bound context with fixed noise constants, so no Monte Carlo is involved."""
    return build_bound_context(
        high_margin_plant,
        bmsb,
        M_V_bar=MgfEstimate(0.1, 0.0),
        M_W_bar=MgfEstimate(0.3, 0.0),
    )


@pytest.fixture
def mc_ctx(high_margin_plant, bmsb):
    return build_bound_context(high_margin_plant, bmsb, np.random.default_rng(1), mgf_samples=200_000)
