import numpy as np
import pytest

from deformslam import observability as ob
from deformslam.lie import exp_rotation


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_ed_instance(rng, m=8, n=20, deform=0.1, consistent=False):
    return ob.make_ed_instance(rng, m, n, deform, consistent)


def random_ts_instance(rng, N=4, F=8, t=3, missing=0.15, noise=0.5):
    """Small time-series problem: observations and a perturbed state.

    Returns ``(obs, state)``; the state's shapes, poses and ``c`` are random
    so residuals are generically non-zero.
    """
    from deformslam.timeseries import ObservationSet, TrajectoryState

    R = np.array([exp_rotation(rng.normal(scale=0.4, size=3)) for _ in range(F)])
    p = rng.normal(scale=10.0, size=(F, 3))
    shapes = rng.uniform(50.0, 150.0, size=(N, F, 3))
    mask = rng.random((N, F)) > missing
    mask[0] = True  # at least one full prior window
    z = np.einsum("jab,ijb->ija", R, shapes - p[None]) + noise * rng.normal(size=(N, F, 3))
    z[~mask] = np.nan
    obs = ObservationSet(z, mask)
    state = TrajectoryState(
        np.array([Rj @ exp_rotation(rng.normal(scale=0.05, size=3)) for Rj in R]),
        p + rng.normal(size=p.shape), shapes + rng.normal(size=shapes.shape), mask.copy(),
        rng.normal(scale=0.5, size=t))
    return obs, state
