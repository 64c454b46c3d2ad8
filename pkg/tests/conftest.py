import numpy as np
import pytest


def rand_ball(m, d, lam, rng):
    """m points uniform in the d-ball of radius lam."""
    raw = rng.standard_normal((m, d))
    norms = np.linalg.norm(raw, axis=1)
    norms[norms == 0] = 1.0
    return raw / norms[:, None] * (lam * rng.uniform(0, 1, (m, 1)) ** (1.0 / d))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
