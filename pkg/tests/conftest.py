import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from idlike.encoder import toy_backend

settings.register_profile("idlike", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("idlike")


@pytest.fixture(scope="session")
def small_backend():
    return toy_backend(7, 16, input_size=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
