import numpy as np
import pytest

from accelflow.core.interaction import Ensemble
from accelflow.core.schedule import ScalingSchedule
from accelflow.core.targets import GaussianInitial, GaussianMixtureTarget, GaussianTarget, Phi0, make_rng
from accelflow.services.config_loader import load_config


@pytest.fixture
def rng():
    """Seeded counter-based generator."""
    return make_rng(1234)


@pytest.fixture
def schedule():
    """Schedule of the single-Gaussian experiment (p=2, C=0.625, t0=1)."""
    return ScalingSchedule(p=2.0, C=0.625, t0=1.0)


@pytest.fixture
def gaussian_target():
    """Target N(-5, 0.25)."""
    return GaussianTarget([-5.0], [[0.25]])


@pytest.fixture
def mixture_target():
    """Target 1/2 N(-2, 0.8) + 1/2 N(2, 0.8)."""
    return GaussianMixtureTarget.symmetric(2.0, 0.8)


@pytest.fixture
def initial_law():
    """Initial law N(2, 4) with phi0(x) = 0.5 (x - 2)."""
    return GaussianInitial(np.array([2.0]), np.array([[4.0]]), Phi0.linear([0.5], -1.0))


@pytest.fixture
def ensemble(initial_law, rng):
    """100 particles drawn from the initial law at t0 = 1."""
    x = initial_law.sample(100, rng)
    return Ensemble(x, initial_law.initial_momentum(x), 1.0)


@pytest.fixture
def small_config(tmp_path):
    """Short single-Gaussian run writing into a temporary directory."""
    return load_config(
        preset="gaussian_fig1",
        overrides=["dynamics.K=20", "output.wall_time=false"],
        seeds=[0, 1],
        output_dir=tmp_path / "out",
    )
