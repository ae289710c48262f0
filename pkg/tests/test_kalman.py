import math

import numpy as np
import pytest
from scipy import stats

from sspe.bayes import PriorSpec
from sspe.functionals import cross_product, em_statistic, square_state, zero_functional
from sspe.kalman import (exact_additive, exact_em_step, exact_score, grid_loglik, grid_ml, grid_posterior,
                         grid_posterior_path, kalman_filter, kalman_loglik, kalman_smoother)
from sspe.model import Theta, simulate_lgssm

from conftest import dense_cov


def _dense_posterior(theta, y):
    T = y.size - 1
    cx, cy = dense_cov(theta, T)
    gain = cx @ np.linalg.inv(cy)
    return gain @ y, cx - gain @ cx


def test_loglik_matches_dense_mvn():
    th = Theta(0.8, 0.1, 1.0)
    y = np.array([0.3, -1.2, 0.5, 2.0, -0.7, 0.1])
    _, cy = dense_cov(th, 5)
    ref = stats.multivariate_normal(np.zeros(6), cy).logpdf(y)
    assert abs(kalman_filter(th, y).loglik - ref) < 1e-10
    assert abs(kalman_loglik(0.8, 0.1, 1.0, y) - ref) < 1e-10


def test_single_observation_loglik():
    th = Theta(0.6, 0.5, 2.0)
    ref = stats.norm(0, math.sqrt(0.5 / 0.64 + 2.0)).logpdf(1.3)
    assert kalman_filter(th, [1.3]).loglik == pytest.approx(ref, abs=1e-13)


def test_degenerate_state_limit(rng):
    y = rng.normal(size=20)
    ll = kalman_filter(Theta(0.0, 1e-12, 1.5), y).loglik
    assert abs(ll - stats.norm(0, math.sqrt(1.5)).logpdf(y).sum()) < 1e-6


def test_rts_matches_dense_conditioning(rng):
    th = Theta(0.7, 0.4, 0.9)
    y = rng.normal(size=4)
    m, C = _dense_posterior(th, y)
    r = kalman_smoother(th, y)
    assert np.max(np.abs(r.smooth_mean - m)) < 1e-10
    assert np.max(np.abs(r.smooth_var - np.diag(C))) < 1e-10
    assert np.max(np.abs(r.lag1_cov - np.diag(C, 1))) < 1e-10


def test_rts_boundary_and_variance_reduction(short_data):
    r = kalman_smoother(Theta(0.8, 0.1, 1.0), short_data.observations)
    assert r.smooth_mean[-1] == r.filt_mean[-1] and r.smooth_var[-1] == r.filt_var[-1]
    assert np.all(r.smooth_var <= r.filt_var + 1e-15)


def test_nonfinite_observation_names_index():
    with pytest.raises(ValueError, match="index 2"):
        kalman_filter(Theta(0.5, 1, 1), [0.0, 1.0, np.nan])


def test_split_invariance(short_data):
    th = Theta(0.8, 0.1, 1.0)
    y = short_data.observations
    full = kalman_filter(th, y)
    a = kalman_filter(th, y[:12])
    prior = (th.rho * a.filt_mean[-1], th.rho**2 * a.filt_var[-1] + th.tau2)
    b = kalman_filter(th, y[12:], prior=prior)
    assert abs(a.loglik + b.loglik - full.loglik) < 1e-12


def test_loglik_checkpoints_agree(short_data):
    y = short_data.observations
    cp = kalman_loglik(0.8, 0.1, 1.0, y, checkpoints=[0, 9, 30])
    for c, v in zip([0, 9, 30], cp):
        assert v == pytest.approx(kalman_loglik(0.8, 0.1, 1.0, y[: c + 1]), abs=1e-12)


def test_exact_additive_zero(short_data):
    assert exact_additive(Theta(0.8, 0.1, 1.0), short_data.observations, zero_functional())[0] == 0.0


def test_exact_cross_product_monte_carlo(rng):
    th = Theta(0.8, 0.1, 1.0)
    y = np.array([0.4, -0.9, 1.1])
    m, C = _dense_posterior(th, y)
    draws = rng.multivariate_normal(m, C, size=1_000_000)
    s = draws[:, 0] * draws[:, 1] + draws[:, 1] * draws[:, 2]
    se = s.std() / math.sqrt(s.size)
    assert abs(exact_additive(th, y, cross_product())[0] - s.mean()) < 3 * se


def test_exact_additive_uninformative(rng):
    th = Theta(0.8, 0.1, 1e8)
    y = rng.normal(size=50)
    v = exact_additive(th, y, square_state())[0]
    assert v == pytest.approx(y.size * th.stationary_var, rel=1e-3)


def test_exact_additive_rejects_non_quadratic():
    from sspe.functionals import AdditiveFunctional

    s = AdditiveFunctional(1, lambda k, xp, x, y, th: np.cos(x)[..., None])
    with pytest.raises(TypeError):
        exact_additive(Theta(0.5, 1, 1), [0.0, 1.0], s)


def _fd_score(th, y, h=1e-5):
    out = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        up = Theta(*(th.as_array() + e))
        dn = Theta(*(th.as_array() - e))
        out.append((kalman_filter(up, y).loglik - kalman_filter(dn, y).loglik) / (2 * h))
    return np.array(out)


def test_score_finite_differences_20_instances(rng):
    for _ in range(20):
        th = Theta(rng.uniform(-0.9, 0.9), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0))
        y = simulate_lgssm(th, int(rng.integers(5, 60)), int(rng.integers(1 << 30))).observations
        sc, fd = exact_score(th, y), _fd_score(th, y)
        assert np.all(np.abs(sc - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-2))


def test_score_vanishes_at_grid_ml():
    th = Theta(0.6, 0.5, 1.0, (True, True, False))
    y = simulate_lgssm(th, 400, 3).observations
    rho_g = np.linspace(0.3, 0.9, 601)
    tau_g = np.linspace(0.2, 1.2, 1001)
    ml, _ = grid_ml(th, y, {"rho": rho_g, "tau2": tau_g})
    th_ml = Theta(ml["rho"], ml["tau2"], 1.0)
    sc = exact_score(th_ml, y)
    # gradient is at most what one grid cell of curvature can produce
    h = np.array([rho_g[1] - rho_g[0], tau_g[1] - tau_g[0]])
    fd2 = []
    for i in range(2):
        e = np.zeros(3)
        e[i] = 1e-4
        fd2.append(abs(exact_score(Theta(*(th_ml.as_array() + e)), y)[i] - sc[i]) / 1e-4)
    assert np.all(np.abs(sc[:2]) <= np.array(fd2) * h)


def test_tau_score_points_to_truth():
    th = Theta(0.8, 0.1, 1.0)
    y = simulate_lgssm(th, 10_000, 9).observations
    assert exact_score(th.replace(tau2=0.05), y)[1] > 0


def test_grid_single_point_mass():
    gp = grid_posterior(PriorSpec(), [0.1, 0.2], {"rho": [0.3]})
    assert gp.weights.tolist() == [1.0]


def test_grid_weights_normalized_and_flat_likelihood(rng):
    y = rng.normal(size=30)
    g = np.linspace(-0.99, 0.99, 199)
    gp = grid_posterior(PriorSpec(), y, {"rho": g}, base=Theta(0.5, 1.0, 1e8))
    assert abs(gp.weights.sum() - 1.0) < 1e-12
    tv = 0.5 * np.abs(gp.weights - 1.0 / g.size).sum()
    assert tv < 1e-3


def test_grid_rejects_support_violation():
    with pytest.raises(ValueError):
        grid_posterior(PriorSpec(), [0.0, 1.0], {"rho": [0.5, 1.5]})
    with pytest.raises(ValueError):
        grid_posterior(PriorSpec(), [0.0, 1.0], {"tau2": [-1.0, 1.0]})


def test_grid_refinement_self_convergence():
    th = Theta(0.5, 1.0, 1.0)
    y = simulate_lgssm(th, 200, 21).observations
    base = Theta(0.5, 1.0, 1.0, (True, False, True))
    coarse = grid_posterior(PriorSpec(), y, {"rho": np.linspace(-0.99, 0.99, 100),
                                             "sigma2": np.linspace(0.2, 3.0, 100)}, base)
    fine = grid_posterior(PriorSpec(), y, {"rho": np.linspace(-0.99, 0.99, 400),
                                           "sigma2": np.linspace(0.2, 3.0, 400)}, base)
    for n in ("rho", "sigma2"):
        assert abs(coarse.mean(n) - fine.mean(n)) < coarse.cell_width(n)


def test_grid_posterior_path_matches_single(short_data):
    y = short_data.observations
    grids = {"rho": np.linspace(-0.9, 0.9, 19), "sigma2": np.linspace(0.5, 2, 7)}
    path = grid_posterior_path(PriorSpec(), y, grids, [10, 30])
    one = grid_posterior(PriorSpec(), y[:11], grids)
    assert np.allclose(path[0].weights, one.weights, atol=1e-13)


def test_grid_loglik_matches_scalar(short_data):
    y = short_data.observations
    ll = grid_loglik(Theta(0.5, 0.2, 1.0), y, {"rho": [0.1, 0.4], "tau2": [0.3]})
    assert ll[1, 0] == pytest.approx(kalman_filter(Theta(0.4, 0.3, 1.0), y).loglik, abs=1e-11)


def test_em_monotone_50_instances(rng):
    for _ in range(50):
        truth = Theta(rng.uniform(-0.9, 0.9), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0))
        y = simulate_lgssm(truth, int(rng.integers(20, 100)), int(rng.integers(1 << 30))).observations
        th = Theta(rng.uniform(-0.9, 0.9), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0))
        for _ in range(3):
            new = exact_em_step(th, y)
            assert kalman_filter(new, y).loglik >= kalman_filter(th, y).loglik - 1e-9
            th = new


def test_em_fixed_point():
    y = simulate_lgssm(Theta(0.8, 0.5, 1.0), 300, 4).observations
    th = Theta(0.5, 1.0, 1.0)
    for _ in range(3000):
        new = exact_em_step(th, y)
        if np.max(np.abs(new.as_array() - th.as_array())) < 1e-12:
            break
        th = new
    again = exact_em_step(th, y)
    assert np.max(np.abs(again.as_array() - th.as_array())) < 1e-8


def test_em_fixed_component_untouched(short_data):
    th = Theta(0.3, 0.2, 0.7, (True, True, False))
    assert exact_em_step(th, short_data.observations).sigma2 == 0.7


def test_em_statistic_total_length(short_data):
    z = exact_additive(Theta(0.8, 0.1, 1.0), short_data.observations, em_statistic())
    assert z.shape == (5,) and np.all(z[1:] > 0)


def test_grid_csv_export(tmp_path):
    gp = grid_posterior(PriorSpec(), [0.1, 0.2], {"rho": [0.1, 0.2], "sigma2": [1.0, 2.0]})
    gp.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "param1,param2,log_unnorm,weight" and len(lines) == 5
