import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspe.model import (LinearGaussian, ModelError, Theta, lg_densities, lg_optimal_proposal, norm_logpdf,
                        simulate_lgssm)


def test_theta_rejects_out_of_range():
    with pytest.raises(ModelError):
        Theta(1.2, 1.0, 1.0)
    with pytest.raises(ModelError):
        Theta(0.5, -1.0, 1.0)
    with pytest.raises(ModelError):
        Theta(0.5, float("nan"), 1.0)


def test_from_std_squares():
    th = Theta.from_std(0.8, 1.0, 0.2)
    assert th.tau2 == 1.0 and th.sigma2 == pytest.approx(0.04)


def test_with_values_keeps_fixed_components():
    th = Theta(0.5, 1.0, 2.0, (True, False, True))
    new = th.with_values(np.array([0.1, 9.0, 3.0]))
    assert (new.rho, new.tau2, new.sigma2) == (0.1, 1.0, 3.0)


def test_simulate_rejects_unit_rho():
    with pytest.raises(ModelError):
        simulate_lgssm(Theta(1.0, 1.0, 1.0), 10, 0)
    tr = simulate_lgssm(Theta(1.0, 1.0, 1.0), 10, 0, init_var=1.0)
    assert tr.horizon == 10


def test_simulate_noiseless_white():
    tr = simulate_lgssm(Theta(0.0, 1.0, 0.0), 20000, 3)
    assert np.array_equal(tr.states, tr.observations)
    x = tr.states
    se = math.sqrt(2.0 / x.size)
    assert abs(x.var() - 1.0) < 4 * se
    assert abs(np.mean(x[1:] * x[:-1])) < 4 / math.sqrt(x.size)


def test_simulate_lag_one_autocovariance():
    th = Theta(0.5, 0.01, 1.0)
    x = simulate_lgssm(th, 5000, 11).states
    xc = x - x.mean()
    prods = xc[1:] * xc[:-1]
    acov = prods.mean()
    # batch-means standard error for the lag-one product
    b = prods[: 4900].reshape(49, 100).mean(axis=1)
    se = b.std(ddof=1) / math.sqrt(b.size)
    assert abs(acov - 0.5 * x.var()) < 3 * se


def test_simulate_reproducible():
    a = simulate_lgssm(Theta(0.8, 0.1, 1.0), 100, 5)
    b = simulate_lgssm(Theta(0.8, 0.1, 1.0), 100, 5)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.observations.tobytes() == b.observations.tobytes()


def test_density_spot_values():
    th = Theta(0.8, 0.1, 1.0)
    m = lg_densities(th)
    assert m.trans_logpdf(th, 0.8, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi * 0.1), abs=1e-14)
    assert m.obs_logpdf(th, 0.3, 0.3) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
    th2 = Theta(0.5, 0.75, 1.0)
    assert m.init_logpdf(th2, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)


def test_optimal_proposal_moments_by_hand():
    th = Theta(1.0, 1.0, 1.0)
    m = LinearGaussian("optimal", init_var=1.0)
    mean, var = m._optimal_moments(th, 2.0, np.array([0.0]))
    assert var == pytest.approx(0.5) and mean[0] == pytest.approx(1.0)


def test_optimal_proposal_uninformative_limit():
    th = Theta(0.7, 0.3, 1e12)
    mean, var = lg_optimal_proposal(th)._optimal_moments(th, 5.0, np.array([2.0]))
    assert var == pytest.approx(0.3, rel=1e-9) and mean[0] == pytest.approx(1.4, rel=1e-9)


def _apf_weight(m, th, y, xp, x):
    return m.log_weight(th, y, xp, x) + m.predictive_logweight(th, y, xp)


def test_optimal_proposal_weight_constant(rng):
    th = Theta(0.8, 0.1, 1.0)
    m = lg_optimal_proposal(th)
    y = 0.7
    xp = rng.normal(size=100) * 3
    x = rng.normal(size=100) * 3
    # with the fully adapted proposal, weight divided by predictive is 0 in log space
    lw = m.log_weight(th, y, xp, x)
    assert np.max(np.abs(lw)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(rho=st.floats(-0.99, 0.99), tau2=st.floats(0.01, 5.0), sigma2=st.floats(0.01, 5.0), y=st.floats(-5, 5),
       seed=st.integers(0, 2**32 - 1))
def test_optimal_weight_constant_property(rho, tau2, sigma2, y, seed):
    th = Theta(rho, tau2, sigma2)
    m = lg_optimal_proposal(th)
    g = np.random.default_rng(seed)
    xp, x = g.normal(size=50) * 4, g.normal(size=50) * 4
    full = (m.obs_logpdf(th, y, x) + m.trans_logpdf(th, x, xp) - m.proposal_logpdf(th, x, y, xp)
            - m.predictive_logweight(th, y, xp))
    w = np.exp(full - full[0])
    assert w.max() / w.min() <= 1 + 1e-10


@settings(max_examples=25, deadline=None)
@given(rho=st.floats(-0.99, 0.99), tau2=st.floats(0.01, 5.0), x=st.floats(-10, 10))
def test_transition_integrates_to_one(rho, tau2, x):
    th = Theta(rho, tau2, 1.0)
    m = lg_densities(th)
    sd = math.sqrt(tau2)
    grid = np.linspace(rho * x - 12 * sd, rho * x + 12 * sd, 20001)
    val = _trapezoid(np.exp(m.trans_logpdf(th, grid, x)), grid)
    assert abs(val - 1.0) < 1e-6


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def test_norm_logpdf_matches_formula():
    assert norm_logpdf(1.0, 0.0, 4.0) == pytest.approx(-0.5 * math.log(8 * math.pi) - 0.125)
