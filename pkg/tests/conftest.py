import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def within_3_sigma(samples, mean):
    samples = np.asarray(samples, dtype=float)
    se = samples.std() / np.sqrt(len(samples))
    return abs(samples.mean() - mean) <= 3 * max(se, 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
