import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,  # reproducible acceptance runs
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hand_params():
    """The 3x4 worked example used across modules."""
    from dfbscan import FinalLayerParams

    return FinalLayerParams(
        weights=[[1, 1, 1, 1], [0, 0, 0, 0], [-1, 1, -1, 1]],
        bias=[0, 1, 0],
    )


def random_params(rng, k=None, d=None, scale=None):
    from dfbscan import FinalLayerParams

    k = k if k is not None else int(rng.integers(3, 51))
    d = d if d is not None else int(rng.integers(4, 513))
    scale = scale if scale is not None else float(rng.uniform(0.01, 2.0))
    return FinalLayerParams(
        weights=rng.normal(0, scale, (k, d)).astype(np.float32),
        bias=rng.normal(0, scale / 10, k).astype(np.float32),
    )
