import numpy as np
import pytest
from hypothesis import settings

from mcre import certify, dynamics

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

Q_TABLE = np.array([
    [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.3, 0.6]],
    [[0.3, 0.4, 0.3], [0.5, 0.25, 0.25], [0.2, 0.2, 0.6]],
])
P_ENV = np.array([[0.8, 0.2], [0.3, 0.7]])


class FiniteOracle:
    """3-state chain in a 2-state Markov environment, all of it exactly computable."""

    def __init__(self):
        self.table = Q_TABLE
        self.P = P_ENV
        self.env = dynamics.EnvironmentSpec("finite-markov", params={"P": P_ENV}, two_sided=True)
        self.init = dynamics.stationary_distribution(P_ENV)
        self.kernel = dynamics.finite_kernel(Q_TABLE)
        self.minor = certify.finite_minorization(self.kernel)
        self.R = 1.0
        self.dob = self.minor.meta["doeblin"](self.R)


@pytest.fixture(scope="session")
def oracle_case():
    return FiniteOracle()
