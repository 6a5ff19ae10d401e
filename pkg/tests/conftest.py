import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sjmvi.selftest import random_setup

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def setup():
    return random_setup(0)
