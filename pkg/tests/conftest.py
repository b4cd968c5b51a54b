import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jowl import models as M
from jowl.synthgen import generate_scene

settings.register_profile("jowl", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("jowl")


@pytest.fixture(scope="session")
def arch():
    return M.ArchConfig()


@pytest.fixture(scope="session")
def random_params(arch):
    """Untrained but non-degenerate weights (full-scale residual init)."""
    return M.init_params(arch, seed=3, residual_scale=1.0)


@pytest.fixture(scope="session")
def scene():
    return generate_scene(11, split_id=2, index=5, n_objects=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
