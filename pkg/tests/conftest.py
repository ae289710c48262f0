import numpy as np
import pytest

from sspe.model import Theta, simulate_lgssm

THETA_STAR = Theta(0.8, 0.1, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def short_data():
    return simulate_lgssm(THETA_STAR, 30, 7)


def dense_cov(theta: Theta, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Joint covariance of x_{0:T} and of y_{0:T} under the stationary law."""
    k = np.arange(T + 1)
    cx = theta.stationary_var * theta.rho ** np.abs(k[:, None] - k[None, :])
    return cx, cx + theta.sigma2 * np.eye(T + 1)
