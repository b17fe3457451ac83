import numpy as np
import pytest

import pfsplit as pf
from pfsplit.schedules import NoiseSchedule, ScheduleEval


@pytest.fixture(scope="session")
def sched():
    return pf.LinearBetaSchedule()


@pytest.fixture(scope="session")
def paper_data():
    return pf.GaussianData(mu=[1.0, -1.0], sigma_mat=[[1.5, 0.6], [0.6, 0.8]])


@pytest.fixture(scope="session")
def exact_field(paper_data, sched):
    return pf.ExactGaussianScore(paper_data, sched)


@pytest.fixture(scope="session")
def probe_1d(sched):
    """d=1 exact field with mu=0, Sigma=1: the backward ODE drift vanishes,
    so the exact solution is constant and any step error is pure scheme error."""
    data = pf.GaussianData(mu=[0.0], sigma_mat=[[1.0]])
    return pf.ExactGaussianScore(data, sched)


class FlatSchedule(NoiseSchedule):
    """Test schedule with f = 0 (identity linear flow) and sigma fixed, so
    splitting steps reduce to bare RK steps on the score drift."""

    def __init__(self, sigma=0.5, g2_fn=None):
        self._sigma = sigma
        self._g2_fn = g2_fn or (lambda t: 2.0)

    def eval(self, t):
        return ScheduleEval(t=t, alpha=1.0, sigma=self._sigma, f=0.0,
                            g2=self._g2_fn(t))

    def integrating_factor(self, t, s):
        return 1.0


@pytest.fixture()
def flat_sched():
    return FlatSchedule()


def zero_field(sched, dim=2):
    return pf.CallableScoreField(lambda x, t: np.zeros_like(x), sched, dim=dim)


@pytest.fixture()
def zero_field_2d(sched):
    return zero_field(sched, dim=2)
