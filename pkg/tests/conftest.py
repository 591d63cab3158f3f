import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hilbert_si.schedules import ScheduleSet
from hilbert_si.verification import gaussian_toy

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy():
    """The n=32 linear-Gaussian coupling and its RBF noise field."""
    return gaussian_toy(32, 0.05)


@pytest.fixture(scope="session")
def sched():
    return ScheduleSet(0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
