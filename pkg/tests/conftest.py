import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from furcnet import NetworkSpec

settings.register_profile(
    "furcnet", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("furcnet")


def tiny_spec(arch="extended_furcated", tasks=1, dropout=0.5, width=8, stage2_width=8):
    """A small off-grid spec for fast tests; full 94/94/2 input layout."""
    if arch == "extended_furcated":
        return NetworkSpec(arch, 2, width, 2, stage2_width, n_tasks=tasks,
                           hidden_dropout=dropout, off_grid=True)
    return NetworkSpec(arch, 2, width, n_tasks=tasks, hidden_dropout=dropout,
                       off_grid=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
