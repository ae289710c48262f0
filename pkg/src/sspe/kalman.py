"""Exact Kalman filtering and smoothing for the scalar linear-Gaussian model.

Everything here is exact (up to floating point) and serves as the oracle
against which the particle estimators are checked.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .functionals import AdditiveFunctional, QuadraticFunctional, score_statistic
from .model import PARAM_NAMES, ModelError, Theta

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class KalmanResult:
    theta: Theta
    y: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray
    loglik_increments: np.ndarray
    smooth_mean: np.ndarray | None = None
    smooth_var: np.ndarray | None = None
    lag1_cov: np.ndarray | None = None

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_increments))

    @property
    def is_smoothed(self) -> bool:
        return self.smooth_mean is not None


def _check_obs(y) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("no observations")
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise ValueError(f"non-finite observation at index {bad[0]}")
    return y


def _check_theta(theta: Theta, stationary: bool = True) -> None:
    if stationary and abs(theta.rho) >= 1.0:
        raise ModelError("Kalman oracle needs |rho| < 1 (stationary prior)")
    if theta.tau2 <= 0.0 or theta.sigma2 <= 0.0:
        raise ModelError("Kalman oracle needs tau2 > 0 and sigma2 > 0")


def kalman_filter(theta: Theta, y, prior=None) -> KalmanResult:
    """Exact predictive/filtered moments and log p(y_n | y_{0:n-1}).

    ``prior`` optionally overrides the stationary initial law with a
    (mean, var) pair for the time-0 predictive; used to chain runs.
    """
    _check_theta(theta, stationary=prior is None)
    y = _check_obs(y)
    n = y.size
    rho, tau2, s2 = theta.rho, theta.tau2, theta.sigma2
    mp = np.empty(n)
    pp = np.empty(n)
    mf = np.empty(n)
    pf = np.empty(n)
    ll = np.empty(n)
    m, p = (0.0, tau2 / (1.0 - rho * rho)) if prior is None else prior
    for k in range(n):
        mp[k], pp[k] = m, p
        s = p + s2
        r = y[k] - m
        ll[k] = -0.5 * (_LOG_2PI + math.log(s) + r * r / s)
        gain = p / s
        m = m + gain * r
        p = p * s2 / s
        mf[k], pf[k] = m, p
        m, p = rho * m, rho * rho * p + tau2
    return KalmanResult(theta, y, mp, pp, mf, pf, ll)


def rts_smoother(result: KalmanResult) -> KalmanResult:
    """Rauch-Tung-Striebel pass adding smoothed moments and lag-one covariances."""
    rho = result.theta.rho
    mf, pf, mp, pp = result.filt_mean, result.filt_var, result.pred_mean, result.pred_var
    n = mf.size
    ms = np.empty(n)
    ps = np.empty(n)
    lag = np.empty(max(n - 1, 0))
    ms[-1], ps[-1] = mf[-1], pf[-1]
    for k in range(n - 2, -1, -1):
        j = pf[k] * rho / pp[k + 1]
        ms[k] = mf[k] + j * (ms[k + 1] - mp[k + 1])
        ps[k] = pf[k] + j * j * (ps[k + 1] - pp[k + 1])
        lag[k] = j * ps[k + 1]
    return replace(result, smooth_mean=ms, smooth_var=ps, lag1_cov=lag)


def kalman_smoother(theta: Theta, y) -> KalmanResult:
    return rts_smoother(kalman_filter(theta, y))


def kalman_loglik(rho, tau2, sigma2, y, checkpoints=None, init_var=None):
    """Exact log-likelihood, vectorized over broadcastable parameter arrays.

    With ``checkpoints`` (sorted time indices) returns an array whose last
    axis holds log p(y_{0:n}) for each checkpoint n.  ``init_var`` fixes
    Var(X_0) instead of using the stationary variance.
    """
    y = _check_obs(y)
    rho, tau2, sigma2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (rho, tau2, sigma2)))
    if init_var is None and np.any(np.abs(rho) >= 1.0):
        raise ModelError("kalman_loglik needs |rho| < 1 for the stationary initial law")
    if np.any(tau2 <= 0.0) or np.any(sigma2 <= 0.0):
        raise ModelError("kalman_loglik needs positive variances")
    rho2 = rho * rho
    m = np.zeros(rho.shape)
    p = tau2 / (1.0 - rho2) if init_var is None else np.full(rho.shape, float(init_var))
    ll = np.zeros(rho.shape)
    marks = None if checkpoints is None else sorted(int(c) for c in checkpoints)
    out = []
    ci = 0
    for k in range(y.size):
        s = p + sigma2
        r = y[k] - m
        ll -= 0.5 * (_LOG_2PI + np.log(s) + r * r / s)
        m = rho * (m + (p / s) * r)
        p = rho2 * (p * sigma2 / s) + tau2
        while marks is not None and ci < len(marks) and marks[ci] == k:
            out.append(ll.copy())
            ci += 1
    if marks is None:
        return ll
    if ci < len(marks):
        raise ValueError("checkpoint beyond the observation horizon")
    return np.stack(out, axis=-1)


def smoothed_pair_moments(result: KalmanResult) -> np.ndarray:
    """E[monomial] for (x_{k-1}^2, x_{k-1}x_k, x_k^2, x_{k-1}, x_k, 1), k = 1..T."""
    if not result.is_smoothed:
        result = rts_smoother(result)
    m, p, c = result.smooth_mean, result.smooth_var, result.lag1_cov
    second = p + m * m
    return np.column_stack([
        second[:-1], c + m[:-1] * m[1:], second[1:], m[:-1], m[1:], np.ones(m.size - 1),
    ])


def exact_additive(theta: Theta, y, s: AdditiveFunctional, result: KalmanResult | None = None) -> np.ndarray:
    """Exact smoothed expectation of sum_k s_k for a quadratic functional."""
    if not isinstance(s, QuadraticFunctional):
        raise TypeError("exact evaluation supports quadratic functionals only")
    if result is None:
        result = kalman_smoother(theta, y)
    elif not result.is_smoothed:
        result = rts_smoother(result)
    yy = result.y
    total = np.zeros(s.dim)
    if s.initial_coeffs is not None:
        m0, p0 = result.smooth_mean[0], result.smooth_var[0]
        total += np.asarray(s.initial_coeffs(yy[0], theta)) @ np.array([p0 + m0 * m0, m0, 1.0])
    if yy.size > 1:
        mom = smoothed_pair_moments(result)
        for k in range(1, yy.size):
            total += np.asarray(s.coeffs(k, yy[k], theta)) @ mom[k - 1]
    return total


def exact_score(theta: Theta, y) -> np.ndarray:
    """Gradient of log p(y_{0:T}) in (rho, tau2, sigma2) via Fisher's identity."""
    _check_theta(theta)
    return exact_additive(theta, y, score_statistic())


def exact_em_step(theta: Theta, y) -> Theta:
    """One exact EM iteration (Kalman E-step, closed-form M-step)."""
    from .functionals import em_statistic
    from .ml import lambda_map

    y = _check_obs(y)
    T = y.size - 1
    if T < 1:
        raise ValueError("EM needs at least two observations")
    z = exact_additive(theta, y, em_statistic(initial=True)) / T
    return lambda_map(z, theta, n_transitions=T)


# --- grid posteriors ------------------------------------------------------


@dataclass
class GridPosterior:
    axes: dict[str, np.ndarray]
    log_unnorm: np.ndarray
    weights: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        lu = self.log_unnorm
        w = np.exp(lu - np.max(lu))
        self.weights = w / w.sum()

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.axes)

    def _marginal(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.names.index(name)
        other = tuple(j for j in range(self.weights.ndim) if j != i)
        return self.axes[name], self.weights.sum(axis=other)

    def mean(self, name: str) -> float:
        g, w = self._marginal(name)
        return float(np.dot(g, w))

    def var(self, name: str) -> float:
        g, w = self._marginal(name)
        m = np.dot(g, w)
        return float(np.dot((g - m) ** 2, w))

    def marginal(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._marginal(name)

    def argmax(self) -> dict[str, float]:
        idx = np.unravel_index(np.argmax(self.log_unnorm), self.log_unnorm.shape)
        return {n: float(self.axes[n][i]) for n, i in zip(self.names, idx)}

    def cell_width(self, name: str) -> float:
        g = self.axes[name]
        return float(np.min(np.diff(g))) if g.size > 1 else 0.0

    def to_csv(self, path) -> None:
        names = self.names
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["param1", "param2", "log_unnorm", "weight"])
            for idx in itertools.product(*(range(len(self.axes[n])) for n in names)):
                p1 = self.axes[names[0]][idx[0]]
                p2 = self.axes[names[1]][idx[1]] if len(names) > 1 else ""
                wr.writerow([repr(float(p1)), "" if p2 == "" else repr(float(p2)),
                             repr(float(self.log_unnorm[idx])), repr(float(self.weights[idx]))])


def grid_loglik(base: Theta, y, grids: dict[str, np.ndarray], checkpoints=None, init_var=None) -> np.ndarray:
    """Exact log-likelihood on the mesh spanned by ``grids`` (others from ``base``)."""
    if not 1 <= len(grids) <= 2:
        raise ValueError("grids must cover one or two parameters")
    for name in grids:
        if name not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {name!r}")
    mesh = np.meshgrid(*(np.asarray(g, dtype=float) for g in grids.values()), indexing="ij")
    vals = {n: np.full(mesh[0].shape, getattr(base, n)) for n in PARAM_NAMES}
    for n, m in zip(grids, mesh):
        vals[n] = m
    return kalman_loglik(vals["rho"], vals["tau2"], vals["sigma2"], y, checkpoints, init_var)


def grid_posterior(prior, y, grids: dict[str, np.ndarray], base: Theta | None = None,
                   init_var=None) -> GridPosterior:
    """Posterior p(theta | y) on a dense grid of at most two free parameters.

    ``prior`` must expose ``logpdf_component(name, values)``; parameters not
    in ``grids`` are held at ``base``.
    """
    if base is None:
        base = Theta(0.5, 1.0, 1.0)
    grids = {n: np.atleast_1d(np.asarray(g, dtype=float)) for n, g in grids.items()}
    lp_axes = []
    for n, g in grids.items():
        lp = np.asarray(prior.logpdf_component(n, g), dtype=float)
        if not np.all(np.isfinite(lp)):
            bad = g[~np.isfinite(lp)][0]
            raise ValueError(f"grid for {n} leaves the prior support (value {bad})")
        lp_axes.append(lp)
    log_prior = sum(np.meshgrid(*lp_axes, indexing="ij"))
    ll = grid_loglik(base, y, grids, init_var=init_var)
    return GridPosterior(dict(grids), ll + log_prior)


def grid_ml(base: Theta, y, grids: dict[str, np.ndarray], init_var=None) -> tuple[dict[str, float], np.ndarray]:
    """Grid maximum-likelihood estimate and the log-likelihood surface."""
    ll = grid_loglik(base, y, grids, init_var=init_var)
    idx = np.unravel_index(np.argmax(ll), ll.shape)
    return {n: float(np.asarray(g)[i]) for (n, g), i in zip(grids.items(), idx)}, ll


def grid_posterior_path(prior, y, grids: dict[str, np.ndarray], checkpoints, base: Theta | None = None,
                        init_var=None) -> list[GridPosterior]:
    """Grid posteriors p(theta | y_{0:n}) at each checkpoint n from one Kalman sweep."""
    if base is None:
        base = Theta(0.5, 1.0, 1.0)
    grids = {n: np.atleast_1d(np.asarray(g, dtype=float)) for n, g in grids.items()}
    lp = sum(np.meshgrid(*(np.asarray(prior.logpdf_component(n, g), dtype=float) for n, g in grids.items()),
                         indexing="ij"))
    if not np.all(np.isfinite(lp)):
        raise ValueError("grid leaves the prior support")
    ll = grid_loglik(base, y, grids, checkpoints, init_var)
    return [GridPosterior(dict(grids), ll[..., i] + lp) for i in range(ll.shape[-1])]
