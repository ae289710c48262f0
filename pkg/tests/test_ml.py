import math

import numpy as np
import pytest
from scipy.optimize import minimize

from sspe.filter import run_filter
from sspe.functionals import em_statistic, score_statistic
from sspe.kalman import exact_additive, exact_em_step, exact_score, grid_ml, kalman_loglik
from sspe.ml import (Backend, ConstantStep, EstimationError, StepSizeSchedule, from_unconstrained, lambda_map,
                     offline_em, offline_gradient, online_em, online_gradient, project, smoothed_additive,
                     to_unconstrained, unconstrained_grad)
from sspe.model import LinearGaussian, Theta, simulate_lgssm
from sspe.particle_core import Streams
from sspe.smooth import forward_smooth

TH = Theta(0.8, 0.1, 1.0)


def _q(theta_arr, z, T):
    r, t2, s2 = theta_arr
    return (-0.5 * T * math.log(t2) - T * (z[3] - 2 * r * z[2] + r * r * z[1]) / (2 * t2)
            - 0.5 * T * math.log(s2) - T * z[0] / (2 * s2))


def test_schedule_validation():
    with pytest.raises(ValueError):
        StepSizeSchedule(1.0, 0.5)
    with pytest.raises(ValueError):
        StepSizeSchedule(0.0, 0.8)
    assert StepSizeSchedule(2.0, 1.0)(4) == 0.5


def test_perfect_fit_hits_boundary():
    x = y = np.ones(3)
    z = np.array([np.mean((y[1:] - x[1:]) ** 2), np.mean(x[:-1] ** 2), np.mean(x[:-1] * x[1:]),
                  np.mean(x[1:] ** 2)])
    th = lambda_map(z, TH)
    assert th.rho == 1.0 and th.tau2 == 0.0 and th.sigma2 == 0.0
    assert set(th.on_boundary()) == {"rho", "tau2", "sigma2"}


def test_lambda_rho_is_cross_over_prev():
    z = np.array([0.7, 2.0, 1.0, 3.0])
    th = lambda_map(z, TH)
    assert th.rho == 0.5 and th.tau2 == pytest.approx(2.5) and th.sigma2 == 0.7
    # grid maximization of the conditional complete-data log-likelihood
    rg = np.linspace(-0.99, 0.99, 199)
    tg = np.linspace(0.5, 5.0, 451)
    Q = np.array([[_q((r, t, 0.7), z, 10) for t in tg] for r in rg])
    i, j = np.unravel_index(np.argmax(Q), Q.shape)
    assert abs(rg[i] - 0.5) <= 0.01 and abs(tg[j] - 2.5) <= 0.01


def test_lambda_rejects_nonpositive():
    with pytest.raises(ValueError):
        lambda_map([1.0, 0.0, 1.0, 1.0], TH)
    with pytest.raises(ValueError):
        lambda_map([1.0, 1.0, 1.0, -1.0], TH)


def test_lambda_respects_mask():
    th = Theta(0.3, 0.4, 0.5, (False, True, False))
    out = lambda_map([0.7, 2.0, 1.0, 3.0], th)
    assert out.rho == 0.3 and out.sigma2 == 0.5 and out.tau2 == pytest.approx(3 - 0.6 + 0.18)


def test_stationary_map_maximizes_full_Q(rng):
    y = simulate_lgssm(TH, 60, 2).observations
    th = Theta(0.5, 0.3, 0.8)
    T = y.size - 1
    z = exact_additive(th, y, em_statistic()) / T
    out = lambda_map(z, th, n_transitions=T)

    def negq(u):
        r, t2, s2 = math.tanh(u[0]), math.exp(u[1]), math.exp(u[2])
        m0 = z[4] * T
        quad = (1 - r * r) * m0 + T * (z[3] - 2 * r * z[2] + r * r * z[1])
        return -(0.5 * math.log(1 - r * r) - 0.5 * (T + 1) * math.log(t2) - quad / (2 * t2)
                 - 0.5 * (T + 1) * math.log(s2) - T * z[0] / (2 * s2))

    res = minimize(negq, to_unconstrained(th), method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12,
                                                                            "maxiter": 20000})
    ref = np.array([math.tanh(res.x[0]), math.exp(res.x[1]), math.exp(res.x[2])])
    assert np.allclose(out.as_array(), ref, atol=1e-5)


def test_alternative_rho_ratio_breaks_monotonicity():
    # rho = z3 / z4 instead of z3 / z2: on this instance the likelihood drops
    y = simulate_lgssm(Theta(0.9, 1.0, 0.1), 300, 3).observations
    th = Theta(0.5, 1.0, 0.1, (True, True, False))
    T = y.size - 1
    z = exact_additive(th, y, em_statistic(initial=False)) / T
    good = lambda_map(z, th)
    r_alt = z[2] / z[3]
    alt = Theta(r_alt, z[3] - 2 * r_alt * z[2] + r_alt**2 * z[1], 0.1)
    ll = lambda t: kalman_loglik(t.rho, t.tau2, t.sigma2, y)
    assert ll(good) > ll(th)
    for _ in range(5):
        z = exact_additive(alt, y, em_statistic(initial=False)) / T
        r_alt = z[2] / z[3]
        new = Theta(r_alt, z[3] - 2 * r_alt * z[2] + r_alt**2 * z[1], 0.1)
        if ll(new) < ll(alt):
            return
        alt = new
    pytest.fail("alternative ratio stayed monotone")


def test_exact_fixed_point_of_lambda():
    y = simulate_lgssm(TH, 200, 4).observations
    th = Theta(0.5, 0.5, 0.5)
    for _ in range(5000):
        new = exact_em_step(th, y)
        if np.max(np.abs(new.as_array() - th.as_array())) < 1e-13:
            break
        th = new
    T = y.size - 1
    again = lambda_map(exact_additive(th, y, em_statistic()) / T, th, n_transitions=T)
    assert np.allclose(again.as_array(), th.as_array(), atol=1e-8)


def test_project_clips_free_only():
    th = project(Theta(1.0, 0.0, 0.0, (True, True, False)))
    assert th.rho < 1.0 and th.tau2 > 0.0 and th.sigma2 == 0.0


def test_unconstrained_roundtrip_and_chain_rule():
    th = Theta(0.3, 0.7, 1.9)
    assert np.allclose(from_unconstrained(to_unconstrained(th), th).as_array(), th.as_array())
    y = simulate_lgssm(th, 30, 1).observations
    u = to_unconstrained(th)
    g = unconstrained_grad(exact_score(th, y), th)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        up, dn = from_unconstrained(u + e, th), from_unconstrained(u - e, th)
        fd = (kalman_loglik(*up.as_array(), y) - kalman_loglik(*dn.as_array(), y)) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-5)


def test_backend_parse():
    assert str(Backend.parse("fixedlag:20")) == "fixedlag:20"
    assert Backend.parse("paris:3").K == 3
    with pytest.raises(ValueError):
        Backend.parse("magic")


def test_offline_em_exact_monotone():
    y = simulate_lgssm(TH, 300, 5).observations
    tr = offline_em(y, Theta(0.1, 1.0, 0.3), 30, "exact")
    assert np.all(np.diff(tr.exact_loglik) >= -1e-9)


def _grid(y, base):
    rg = np.linspace(0.5, 0.95, 91)
    tg = np.linspace(0.02, 0.3, 141)
    ml, _ = grid_ml(base, y, {"rho": rg, "tau2": tg})
    return Theta(ml["rho"], ml["tau2"], base.sigma2, base.free_mask), rg[1] - rg[0], tg[1] - tg[0]


def test_em_and_gradient_stay_at_grid_ml():
    y = simulate_lgssm(TH, 500, 6).observations
    start, dr, dt = _grid(y, Theta(0.8, 0.1, 1.0, (True, True, False)))
    for tr in (offline_em(y, start, 1, "exact"), offline_gradient(y, start, 1, "exact")):
        moved = np.abs(tr.final.as_array() - start.as_array())
        assert moved[0] < dr and moved[1] < dt and moved[2] == 0.0


def test_gradient_sign_on_tau2():
    y = simulate_lgssm(TH, 2000, 7).observations
    th0 = Theta(0.8, 0.05, 1.0, (False, True, False))
    tr = offline_gradient(y, th0, 1, "exact")
    assert tr.final.tau2 > 0.05


def test_gradient_exact_monotone_with_line_search():
    y = simulate_lgssm(TH, 300, 8).observations
    tr = offline_gradient(y, Theta(0.2, 0.5, 2.0), 20, "exact")
    assert np.all(np.diff(tr.exact_loglik) >= -1e-12)


def test_particle_score_ffbsm_backend():
    y = simulate_lgssm(TH, 200, 9).observations
    exact = exact_score(TH, y)
    est = np.array([smoothed_additive(y, TH, score_statistic(), "ffbsm", 500, Streams(3, r)) for r in range(50)])
    assert np.all(np.abs(est.mean(axis=0) - exact) < 3 * est.std(axis=0, ddof=1))


@pytest.mark.parametrize("backend", ["pathspace", "paris:2"])
def test_particle_score_error_shrinks_with_N(backend):
    y = simulate_lgssm(TH, 200, 10).observations
    exact = exact_score(TH, y)
    med = []
    for N in (100, 400, 1600):
        err = [np.max(np.abs(smoothed_additive(y, TH, score_statistic(), backend, N, Streams(N, r)) - exact))
               for r in range(100)]
        med.append(np.median(err))
    assert med[0] > med[1] > med[2]


def test_nonfinite_gradient_halts(monkeypatch):
    import sspe.ml as ml

    monkeypatch.setattr(ml, "smoothed_additive", lambda *a, **k: np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(EstimationError) as ei:
        offline_gradient(np.zeros(5), TH, 3, "forward")
    assert ei.value.index == 0


def test_backend_failure_reports_iteration():
    class Dead(LinearGaussian):
        def obs_logpdf(self, theta, y, x):
            return np.full(np.shape(x), -np.inf)

    with pytest.raises(EstimationError) as ei:
        offline_em(np.zeros(5), TH, 2, "forward", 10, model=Dead())
    assert ei.value.index == 0


@pytest.mark.parametrize("backend", ["pathspace", "fixedlag:5", "ffbsm", "forward", "paris:2"])
def test_particle_em_keeps_fixed_bits(backend):
    y = simulate_lgssm(TH, 60, 11).observations
    th0 = Theta(0.3, 0.2, 0.123456789, (True, True, False))
    tr = offline_em(y, th0, 3, backend, 50, seed=1)
    assert all(t.sigma2 == th0.sigma2 for t in tr.thetas)
    tg = offline_gradient(y, th0, 2, backend, 50, seed=1)
    assert all(t.sigma2 == th0.sigma2 for t in tg.thetas)


def test_online_fixed_bits_and_freeze():
    y = simulate_lgssm(TH, 300, 12).observations
    th0 = Theta(0.3, 0.2, 0.5, (True, True, False))
    tr = online_em(y, th0, StepSizeSchedule(), 50, n_freeze=40, seed=2)
    assert all(t == th0 for t in tr.thetas[:41])
    assert tr.thetas[42] != th0
    assert all(t.sigma2 == 0.5 for t in tr.thetas)
    rg = online_gradient(y, th0, StepSizeSchedule(0.01), 50, seed=2)
    assert all(t.sigma2 == 0.5 for t in rg.thetas)


def test_online_gradient_zero_schedule_is_constant():
    y = simulate_lgssm(TH, 100, 13).observations
    tr = online_gradient(y, TH, ConstantStep(0.0), 30)
    assert all(t == TH for t in tr.thetas)


def test_online_gradient_overshoot_is_projected():
    start = Theta(0.95, 0.1, 1.0, (True, False, False))
    y = simulate_lgssm(Theta(0.95, 0.1, 1.0), 60, 21).observations
    tr = online_gradient(y, start, ConstantStep(50.0), 30, seed=2)
    rhos = np.array([t.rho for t in tr.thetas])
    assert np.all(np.abs(rhos) <= 0.9999)
    assert np.any(np.abs(rhos) == 0.9999)
    assert all(t.tau2 == 0.1 and t.sigma2 == 1.0 for t in tr.thetas)


def test_project_clips_raw_values():
    th = Theta(0.5, 0.1, 1.0, (True, True, False))
    out = project(th, np.array([1.7, -3.0, -5.0]))
    assert (out.rho, out.tau2, out.sigma2) == (0.9999, 1e-8, 1.0)


def test_online_em_unit_gamma_is_one_step_statistic():
    y = simulate_lgssm(TH, 50, 14).observations
    tr = online_em(y, TH, ConstantStep(1.0), 40, n_freeze=10_000, seed=3, record_stats=True)
    f = run_filter(LinearGaussian(), TH, y, 40, seed=3)
    s = em_statistic(initial=False)
    for n in (1, 17, 50):
        prev, cur = f.systems[n - 1], f.systems[n]
        from sspe.smooth import backward_log_kernel
        B = np.exp(backward_log_kernel(prev, cur, LinearGaussian(), TH))
        terms = s.term(n, prev.positions[None, :], cur.positions[:, None], y[n], TH)
        ref = cur.norm_weights @ np.einsum("ij,ijd->id", B, terms)
        assert np.allclose(tr.info["stats"][n], ref, rtol=1e-12)


def test_online_em_harmonic_gamma_is_running_mean():
    y = simulate_lgssm(TH, 80, 15).observations
    tr = online_em(y, TH, lambda n: 1.0 / n, 40, n_freeze=10_000, seed=4, record_stats=True)
    f = run_filter(LinearGaussian(), TH, y, 40, seed=4)
    fw = forward_smooth(f, TH, em_statistic(initial=False), y)
    n = np.arange(1, y.size)
    assert np.allclose(tr.info["stats"][1:], fw[1:] / n[:, None], rtol=1e-8)


def test_trace_csv(tmp_path):
    y = simulate_lgssm(TH, 20, 1).observations
    tr = offline_em(y, TH, 2, "exact")
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter_or_n,rho,tau2,sigma2,exact_loglik" and len(lines) == 4


@pytest.mark.slow
def test_online_gradient_consistency():
    th = Theta(0.8, 0.1, 1.0, (True, False, False))
    y = simulate_lgssm(th, 20_000, 16).observations
    start = Theta(0.5, 0.1, 1.0, (True, False, False))
    hits = 0
    for r in range(50):
        tr = online_gradient(y, start, StepSizeSchedule(1.0, 0.8), 100, seed=Streams(16, r))
        hits += abs(tr.final.rho - 0.8) < 0.1
    assert hits >= 40


@pytest.mark.slow
@pytest.mark.xfail(reason="once ancestral lines coalesce (a few hundred steps at N=100) the per-step path-space "
                          "increment is stationary; only the accumulated estimate has growing variance",
                   strict=False)
def test_pathspace_score_increment_variance_grows():
    y = simulate_lgssm(TH, 10_000, 17).observations
    inc = {"forward": [], "pathspace": []}
    for r in range(50):
        for kind in inc:
            tr = online_gradient(y, TH, ConstantStep(0.0), 100, kind, seed=Streams(17, r), record_increments=True)
            d = tr.info["score_increments"][:, 1]
            inc[kind].append([d[900:1000], d[9900:10000]])
    var = {k: np.var(np.array(v), axis=0).mean(axis=1) for k, v in inc.items()}
    assert var["pathspace"][1] > var["pathspace"][0]
    assert var["forward"][1] < 2 * var["forward"][0]
