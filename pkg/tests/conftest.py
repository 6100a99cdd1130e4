import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import helpers

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def toy():
    """(graph, weight store) of the committed toy residual network."""
    return helpers.load_toy_model()


@pytest.fixture(scope="session")
def goldens():
    return helpers.load_goldens()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
