import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "afd", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("afd")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def preset():
    from afd.config import paper_sim

    return paper_sim()
