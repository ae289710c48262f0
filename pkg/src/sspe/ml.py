"""Maximum-likelihood drivers for the linear-Gaussian model.

Off-line EM and gradient ascent re-run a particle smoother over the whole
batch at each iteration; the on-line variants update the parameter after
every observation while the filter keeps running.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .filter import FilterOptions, filter_step, filter_stream, run_filter
from .functionals import AdditiveFunctional, em_statistic, score_statistic
from .kalman import exact_additive, kalman_loglik
from .model import PARAM_NAMES, LinearGaussian, ModelContract, Theta
from .particle_core import Streams, as_streams
from .smooth import (
    FixedLagSmoother,
    ForwardSmoother,
    ParisSmoother,
    PathSpaceSmoother,
    ffbsm_additive,
)

RHO_MAX = 0.9999
VAR_MIN = 1e-8


class EstimationError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        self.index = index
        super().__init__(f"iteration {index}: {type(cause).__name__}: {cause}")


# --- step sizes -----------------------------------------------------------


@dataclass(frozen=True)
class StepSizeSchedule:
    """gamma_n = c * n^(-alpha) with alpha in (0.5, 1]."""

    c: float = 1.0
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0.5, 1], got {self.alpha}")
        if not self.c > 0.0:
            raise ValueError("c must be > 0")

    def __call__(self, n: int) -> float:
        return self.c * float(n) ** (-self.alpha)


@dataclass(frozen=True)
class ConstantStep:
    """Constant gamma; only for degenerate checks (it violates the usual conditions)."""

    value: float

    def __call__(self, n: int) -> float:
        return self.value


# --- M-step ---------------------------------------------------------------


def lambda_map(z, theta: Theta, n_transitions: int | None = None) -> Theta:
    """M-step of EM from averaged statistics.

    ``z = (z1, z2, z3, z4)`` holds per-transition averages of
    ((y_k - x_k)^2, x_{k-1}^2, x_{k-1} x_k, x_k^2) and the map maximizes the
    conditional likelihood given x_0: rho = z3 / z2, tau2 = z4 - z3^2 / z2,
    sigma2 = z1.

    A fifth entry z5 = E[x_0^2] / T (with ``n_transitions = T``) switches
    to exact maximization under the stationary initial law, where z1 also
    includes the time-0 residual.  rho then maximizes the profile
    likelihood numerically; tau2 and sigma2 are closed form given rho.

    Fixed components of ``theta`` pass through unchanged.
    """
    z = np.asarray(z, dtype=float)
    if z.shape not in ((4,), (5,)):
        raise ValueError("z must have 4 or 5 components")
    if not z[1] > 0.0 or not z[3] > 0.0:
        raise ValueError(f"lambda_map needs z2 > 0 and z4 > 0, got z={z}")
    free = dict(zip(PARAM_NAMES, theta.free_mask))
    rho, tau2, sigma2 = theta.rho, theta.tau2, theta.sigma2

    if z.size == 4:
        if free["rho"]:
            rho = z[2] / z[1]
        if free["tau2"]:
            tau2 = z[3] - 2.0 * rho * z[2] + rho * rho * z[1]
        if free["sigma2"]:
            sigma2 = z[0]
    else:
        if n_transitions is None or n_transitions < 1:
            raise ValueError("the 5-component map needs n_transitions >= 1")
        T = float(n_transitions)
        m0 = z[4] * T

        def quad(r):
            return (1.0 - r * r) * m0 + T * (z[3] - 2.0 * r * z[2] + r * r * z[1])

        if free["rho"]:
            if free["tau2"]:
                def neg(r):
                    return -(0.5 * math.log1p(-r * r) - 0.5 * (T + 1.0) * math.log(quad(r) / (T + 1.0)))
            else:
                def neg(r):
                    return -(0.5 * math.log1p(-r * r) - quad(r) / (2.0 * tau2))
            rho = _maximize_on_interval(neg)
        if free["tau2"]:
            tau2 = quad(rho) / (T + 1.0)
        if free["sigma2"]:
            sigma2 = z[0] * T / (T + 1.0)
    rho = float(np.clip(rho, -1.0, 1.0))
    return Theta(rho, max(tau2, 0.0), max(sigma2, 0.0), theta.free_mask)


def _maximize_on_interval(neg: Callable[[float], float], lim: float = 1.0 - 1e-12) -> float:
    # coarse scan to bracket the optimum, then bounded Brent
    grid = np.linspace(-lim, lim, 401)
    vals = np.array([neg(g) for g in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
    return float(res.x) if res.fun <= vals[i] else float(grid[i])


def _clip(values) -> np.ndarray:
    rho, tau2, sigma2 = (float(v) for v in values)
    return np.array([np.clip(rho, -RHO_MAX, RHO_MAX), max(tau2, VAR_MIN), max(sigma2, VAR_MIN)])


def project(theta: Theta, values=None) -> Theta:
    """Clip free components into |rho| <= RHO_MAX and variances >= VAR_MIN.

    ``values`` may carry a raw (rho, tau2, sigma2) update that is not yet a
    valid ``Theta`` (for instance rho past 1); ``theta`` then only supplies
    the fixed components and the free mask.
    """
    raw = theta.as_array() if values is None else np.where(theta.free_mask, values, theta.as_array())
    return theta.with_values(_clip(raw))


# --- E-step backends ------------------------------------------------------


BACKENDS = ("exact", "pathspace", "fixedlag", "ffbsm", "forward", "paris")


@dataclass(frozen=True)
class Backend:
    """Smoothing backend; ``lag`` for fixedlag, ``K`` for paris."""

    name: str = "forward"
    lag: int = 10
    K: int = 2

    def __post_init__(self):
        if self.name not in BACKENDS:
            raise ValueError(f"unknown backend {self.name!r}; expected one of {BACKENDS}")

    @classmethod
    def parse(cls, spec) -> "Backend":
        """Accepts ``"forward"``, ``"fixedlag:20"``, ``"paris:2"`` or a Backend."""
        if isinstance(spec, Backend):
            return spec
        name, _, arg = str(spec).partition(":")
        if name == "fixedlag" and arg:
            return cls(name, lag=int(arg))
        if name == "paris" and arg:
            return cls(name, K=int(arg))
        return cls(name)

    def __str__(self):
        if self.name == "fixedlag":
            return f"fixedlag:{self.lag}"
        if self.name == "paris":
            return f"paris:{self.K}"
        return self.name


def smoothed_additive(y, theta: Theta, s: AdditiveFunctional, backend, N: int, seed=0,
                      model: ModelContract | None = None,
                      options: FilterOptions = FilterOptions()) -> np.ndarray:
    """Estimate of E[sum_k s_k | y_{0:T}] at ``theta`` with the chosen backend."""
    backend = Backend.parse(backend)
    y = np.asarray(y, dtype=float)
    if backend.name == "exact":
        return exact_additive(theta, y, s)
    model = LinearGaussian() if model is None else model
    streams = as_streams(seed)
    if backend.name == "ffbsm":
        out = run_filter(model, theta, y, N, options, streams)
        return ffbsm_additive(out, theta, s, y, model)
    if backend.name == "pathspace":
        sm = PathSpaceSmoother(s, model, record=False)
    elif backend.name == "fixedlag":
        sm = FixedLagSmoother(s, backend.lag, model, record=False)
    elif backend.name == "forward":
        sm = ForwardSmoother(s, model, record=False)
    else:
        sm = ParisSmoother(s, backend.K, streams.child(1).generator(), model, record=False)
    est = None
    for sys in filter_stream(model, theta, y, N, options, streams):
        if est is None:
            est = sm.start(sys, y[0], theta)
        else:
            est = sm.update(sys, y[sys.time_index], theta)
    return est


# --- traces ---------------------------------------------------------------


@dataclass
class EstimateTrace:
    """Parameter sequence with optional exact log-likelihood per entry."""

    thetas: list[Theta]
    exact_loglik: np.ndarray | None = None
    index: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def values(self) -> np.ndarray:
        return np.array([t.as_array() for t in self.thetas])

    @property
    def final(self) -> Theta:
        return self.thetas[-1]

    def to_csv(self, path) -> None:
        idx = np.arange(len(self.thetas)) if self.index is None else self.index
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter_or_n", "rho", "tau2", "sigma2", "exact_loglik"])
            for i, th in enumerate(self.thetas):
                ll = "" if self.exact_loglik is None else repr(float(self.exact_loglik[i]))
                wr.writerow([int(idx[i]), repr(th.rho), repr(th.tau2), repr(th.sigma2), ll])


def _exact_ll(theta: Theta, y) -> float:
    return float(kalman_loglik(theta.rho, theta.tau2, theta.sigma2, y))


# --- off-line EM ----------------------------------------------------------


def offline_em(y, theta0: Theta, iters: int, backend="exact", N: int = 100, seed=0,
               model: ModelContract | None = None, options: FilterOptions = FilterOptions()) -> EstimateTrace:
    """Batch EM; iteration k's E-step uses stream family ``seed.child(k)``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    y = np.asarray(y, dtype=float)
    T = y.size - 1
    if T < 1:
        raise ValueError("EM needs at least two observations")
    streams = as_streams(seed)
    s = em_statistic(initial=True)
    theta = theta0
    thetas = [theta]
    lls = [_exact_ll(theta, y)]
    for k in range(iters):
        try:
            S = smoothed_additive(y, theta, s, backend, N, streams.child(k), model, options)
            theta = lambda_map(S / T, theta, n_transitions=T)
            if Backend.parse(backend).name != "exact":
                theta = project(theta)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise EstimationError(k, exc) from exc
        thetas.append(theta)
        lls.append(_exact_ll(project(theta), y))
    return EstimateTrace(thetas, np.array(lls), info={"backend": str(Backend.parse(backend)), "N": N})


# --- off-line gradient ----------------------------------------------------


def to_unconstrained(theta: Theta) -> np.ndarray:
    return np.array([math.atanh(theta.rho), math.log(theta.tau2), math.log(theta.sigma2)])


def from_unconstrained(u, theta: Theta) -> Theta:
    u = np.asarray(u, dtype=float)
    return theta.with_values(np.array([math.tanh(u[0]), math.exp(u[1]), math.exp(u[2])]))


def unconstrained_grad(score, theta: Theta) -> np.ndarray:
    """Chain rule from (rho, tau2, sigma2) to (atanh rho, log tau2, log sigma2)."""
    jac = np.array([1.0 - theta.rho**2, theta.tau2, theta.sigma2])
    return np.asarray(score, dtype=float) * jac


def offline_gradient(y, theta0: Theta, iters: int, backend="exact", N: int = 100, step: float = 0.5,
                     schedule: Callable[[int], float] | None = None, seed=0, line_search: bool = True,
                     model: ModelContract | None = None,
                     options: FilterOptions = FilterOptions()) -> EstimateTrace:
    """Steepest ascent on log p(y)/(T+1) in unconstrained coordinates.

    With ``line_search`` the step starts at ``step`` and is halved until the
    exact log-likelihood does not decrease (at most 30 halvings).  Without
    it, iteration k uses ``schedule(k + 1)`` (default ``step / (k + 1)``).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    y = np.asarray(y, dtype=float)
    scale = 1.0 / y.size
    streams = as_streams(seed)
    s = score_statistic()
    mask = np.asarray(theta0.free_mask, dtype=float)
    theta = theta0
    thetas = [theta]
    lls = [_exact_ll(theta, y)]
    halvings = 0
    for k in range(iters):
        try:
            score = smoothed_additive(y, theta, s, backend, N, streams.child(k), model, options)
            g = unconstrained_grad(score, theta) * mask * scale
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient {g}")
            u = to_unconstrained(theta)
            if line_search:
                h = step
                for _ in range(31):
                    cand = from_unconstrained(u + h * g, theta)
                    if _exact_ll(cand, y) >= lls[-1]:
                        break
                    h *= 0.5
                    halvings += 1
                else:
                    cand = theta
            else:
                gam = schedule(k + 1) if schedule is not None else step / (k + 1)
                cand = from_unconstrained(u + gam * g, theta)
        except Exception as exc:  # noqa: BLE001
            raise EstimationError(k, exc) from exc
        theta = cand
        thetas.append(theta)
        lls.append(_exact_ll(theta, y))
    return EstimateTrace(thetas, np.array(lls),
                         info={"backend": str(Backend.parse(backend)), "N": N, "halvings": halvings})


# --- on-line drivers ------------------------------------------------------


def _online_smoother(kind: str, s, model):
    if kind == "forward":
        return ForwardSmoother(s, model, record=False)
    if kind == "pathspace":
        return PathSpaceSmoother(s, model, record=False)
    raise ValueError(f"on-line smoothing must be 'forward' or 'pathspace', got {kind!r}")


def online_gradient(y, theta0: Theta, schedule: Callable[[int], float], N: int, smoothing: str = "forward",
                    seed=0, model: ModelContract | None = None, options: FilterOptions = FilterOptions(),
                    record_increments: bool = False) -> EstimateTrace:
    """Recursive maximum likelihood.

    After filtering y_n with theta_n, the time-varying score estimate S_n is
    updated with terms evaluated at theta_n and
    theta_{n+1} = theta_n + gamma_{n+1} (S_n - S_{n-1}), projected.
    Entry n of the trace is theta_{n+1}; entry 0 of ``thetas`` is theta_0.
    """
    model = LinearGaussian() if model is None else model
    y = np.asarray(y, dtype=float)
    streams = as_streams(seed)
    s = score_statistic()
    sm = _online_smoother(smoothing, s, model)
    theta = theta0
    thetas = [theta]
    incs = []
    prev_est = np.zeros(3)
    sys = None
    for n, yn in enumerate(y):
        sys = filter_step(sys, model, theta, yn, streams.step(n), N=N, options=options, time_index=n)
        est = sm.start(sys, yn, theta) if n == 0 else sm.update(sys, yn, theta)
        delta = est - prev_est
        prev_est = est
        if record_increments:
            incs.append(delta)
        gam = schedule(n + 1)
        if gam != 0.0:
            theta = project(theta, theta.as_array() + gam * delta)
        thetas.append(theta)
    info = {"smoothing": smoothing, "N": N}
    if record_increments:
        info["score_increments"] = np.array(incs)
    return EstimateTrace(thetas, None, np.arange(-1, y.size), info)


def online_em(y, theta0: Theta, schedule: Callable[[int], float], N: int, n_freeze: int = 50,
              smoothing: str = "forward", seed=0, model: ModelContract | None = None,
              options: FilterOptions = FilterOptions(), record_stats: bool = False) -> EstimateTrace:
    """On-line EM with running statistic S_n and M-step theta_{n+1} = Lambda(S_n).

    S_0 = 0 and, for n >= 1, the per-particle table follows the forward
    recursion with weights (1 - gamma_n, gamma_n).  The M-step is applied
    from n = n_freeze on; before that theta stays at theta_0.
    """
    if n_freeze < 1:
        raise ValueError("n_freeze must be >= 1")
    model = LinearGaussian() if model is None else model
    y = np.asarray(y, dtype=float)
    streams = as_streams(seed)
    s = em_statistic(initial=False)
    sm = _online_smoother(smoothing, s, model)
    theta = theta0
    thetas = [theta]
    stats = []
    sys = None
    for n, yn in enumerate(y):
        sys = filter_step(sys, model, theta, yn, streams.step(n), N=N, options=options, time_index=n)
        if n == 0:
            S = sm.start(sys, yn, theta, gamma=0.0)
        else:
            S = sm.update(sys, yn, theta, gamma=schedule(n))
        if record_stats:
            stats.append(S)
        if n >= n_freeze:
            theta = project(lambda_map(S, theta))
        thetas.append(theta)
    info = {"smoothing": smoothing, "N": N, "n_freeze": n_freeze}
    if record_stats:
        info["stats"] = np.array(stats)
    return EstimateTrace(thetas, None, np.arange(-1, y.size), info)


__all__ = [
    "Backend",
    "ConstantStep",
    "EstimateTrace",
    "EstimationError",
    "StepSizeSchedule",
    "lambda_map",
    "offline_em",
    "offline_gradient",
    "online_em",
    "online_gradient",
    "project",
    "smoothed_additive",
]
