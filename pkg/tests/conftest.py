import numpy as np
import pytest

from mshw import phase_type as pt
from mshw.scenario import ArrivalLaw, PatienceLaw, Scenario

COXIAN = dict(p=[1.0, 0.0], nu=[1.0, 2.0], P=[[0.0, 0.5], [0.0, 0.0]])
MIXED = dict(p=[0.6, 0.4], nu=[1.0, 3.0], P=[[0.0, 0.3], [0.2, 0.0]])


@pytest.fixture
def coxian():
    return pt.validate(**COXIAN)


@pytest.fixture
def mixed():
    return pt.validate(**MIXED)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def critical(ph, patience=None, arrival=None, beta=1.0, name=""):
    return Scenario(
        ph,
        arrival or ArrivalLaw.of("exponential"),
        patience or PatienceLaw.of("exponential", rate=1.0),
        ph.mu,
        beta,
        name=name,
    )


def overloaded(ph, lam, alpha=1.0, beta=0.0):
    return Scenario(ph, ArrivalLaw.of("exponential"), PatienceLaw.of("exponential", rate=alpha), lam, beta, "overloaded")


def erlang_a(n, rate, mu=1.0, alpha=1.0):
    """M/M/n+M with arrival rate exactly ``rate`` at size ``n``."""
    ph = pt.exponential(mu)
    beta = Scenario.beta_for_rate(ph, mu, n, rate)
    return Scenario(ph, ArrivalLaw.of("exponential"), PatienceLaw.of("exponential", rate=alpha), mu, beta)
