import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blqstack.core import VectorPath

settings.register_profile("blq", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("blq")


def smooth_path(rng, grid, dim=1, modes=4):
    """Deterministic path built from a few random sine modes."""
    t = grid.nodes
    vals = np.zeros((grid.N + 1, dim))
    for j in range(modes):
        vals += np.outer(np.sin((j + 1) * np.pi * t / grid.T + rng.uniform(0, 2 * np.pi)),
                         rng.normal(size=dim)) / (j + 1)
    return VectorPath(grid, vals[None])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_game(rng, n, grid, C=0.0):
    """Well-conditioned constant-coefficient game with SA-style weights."""
    from blqstack.follower import GameCoefficients

    def spd(scale):
        M = rng.normal(size=(n, n)) * scale
        return M @ M.T + 0.2 * np.eye(n)
    return GameCoefficients.constant(
        grid, n=n, A=rng.normal(size=(n, n)) * 0.3 - 0.3 * np.eye(n),
        B1=rng.normal(size=(n, n)) * 0.5, B2=rng.normal(size=(n, n)) * 0.5, C=C * np.eye(n),
        Q1=spd(0.3), Q2=spd(0.3), S1=spd(0.3), S2=spd(0.3), R11=spd(0.3) + np.eye(n),
        R22=spd(0.3) + np.eye(n), G1=spd(0.3) + np.eye(n), H1=spd(0.2), H2=spd(0.2))
