"""Bayesian parameter inference: PMMH, particle Gibbs and MCMC-within-SMC."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .filter import FilterOptions, FilterOutput, filter_step, run_filter
from .kalman import kalman_loglik
from .model import PARAM_NAMES, LinearGaussian, ModelContract, Theta, Trajectory
from .particle_core import (
    ParticleCollapse,
    ParticleSystem,
    as_streams,
    ess,
    normalize_log_weights,
    resample,
    sample_categorical,
)
from .smooth import ffbsa_sample

log = logging.getLogger(__name__)

PMMH_SD_TARGET = 1.3


# --- prior ----------------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    """rho ~ U[-1, 1], tau2 ~ IG(a, b), sigma2 ~ IG(c, d) (shape, scale)."""

    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) <= 0.0:
            raise ValueError("inverse-gamma shapes and scales must be > 0")

    def shape_scale(self, name: str) -> tuple[float, float]:
        return {"tau2": (self.a, self.b), "sigma2": (self.c, self.d)}[name]

    def logpdf_component(self, name: str, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if name == "rho":
            return np.where(np.abs(v) <= 1.0, -math.log(2.0), -np.inf)
        if name not in ("tau2", "sigma2"):
            raise ValueError(f"unknown parameter {name!r}")
        k, s = self.shape_scale(name)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = sps.invgamma.logpdf(v, k, scale=s)
        return np.where(v > 0.0, out, -np.inf)

    def logpdf(self, theta: Theta) -> float:
        return float(sum(self.logpdf_component(n, getattr(theta, n)) for n in theta.free_names))

    def sample_component(self, name: str, rng: np.random.Generator, size=None):
        if name == "rho":
            return rng.uniform(-1.0, 1.0, size)
        k, s = self.shape_scale(name)
        return s / rng.gamma(k, 1.0, size)

    def sample(self, rng: np.random.Generator, base: Theta) -> Theta:
        """Draw the free components of ``base`` from the prior."""
        vals = base.as_array()
        for i in base.free_index:
            vals[i] = self.sample_component(PARAM_NAMES[i], rng)
        return base.with_values(vals)


# --- sufficient statistics ------------------------------------------------


@dataclass
class SuffStats:
    """Complete-data sums for the linear-Gaussian model.

    ``prev_sq``, ``cross`` and ``cur_sq`` sum x_{k-1}^2, x_{k-1} x_k and x_k^2
    over k = 1..n; ``resid_sq`` sums (y_k - x_k)^2 over k = 0..n.  Fields may
    be arrays (one entry per particle).
    """

    x0_sq: np.ndarray
    prev_sq: np.ndarray
    cross: np.ndarray
    cur_sq: np.ndarray
    resid_sq: np.ndarray
    n: int = 0

    @classmethod
    def start(cls, x0, y0) -> "SuffStats":
        x0 = np.asarray(x0, dtype=float)
        z = np.zeros_like(x0)
        return cls(x0 * x0, z, z.copy(), z.copy(), (y0 - x0) ** 2, 0)

    @classmethod
    def from_path(cls, x, y) -> "SuffStats":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.size < 1:
            raise ValueError("path and observations must have equal length >= 1")
        return cls(x[0] ** 2, np.dot(x[:-1], x[:-1]), np.dot(x[:-1], x[1:]), np.dot(x[1:], x[1:]),
                   np.dot(y - x, y - x), x.size - 1)

    def update(self, x_prev, x_new, y_new) -> "SuffStats":
        return SuffStats(self.x0_sq, self.prev_sq + x_prev * x_prev, self.cross + x_prev * x_new,
                         self.cur_sq + x_new * x_new, self.resid_sq + (y_new - x_new) ** 2, self.n + 1)

    def take(self, idx) -> "SuffStats":
        return SuffStats(self.x0_sq[idx], self.prev_sq[idx], self.cross[idx], self.cur_sq[idx],
                         self.resid_sq[idx], self.n)

    def trans_sq(self, rho):
        """sum_{k=1..n} (x_k - rho x_{k-1})^2."""
        return np.maximum(self.cur_sq - 2.0 * rho * self.cross + rho * rho * self.prev_sq, 0.0)

    @property
    def ts(self):
        """(sum (x_k - x_{k-1})^2, sum (y_k - x_k)^2)."""
        return self.trans_sq(1.0), self.resid_sq

    @property
    def rs(self):
        """(sum x_{k-1} x_k, sum x_{k-1}^2, sum (y_k - x_k)^2)."""
        return self.cross, self.prev_sq, self.resid_sq


def stats_variant(free_mask) -> str:
    free = tuple(bool(f) for f in free_mask)
    return {(False, True, True): "ts", (True, False, True): "rs"}.get(free, "general")


# --- exact conditionals ---------------------------------------------------


def _draw_ig(shape, scale, rng):
    shape, scale = np.broadcast_arrays(np.asarray(shape, float), np.asarray(scale, float))
    return scale / rng.gamma(shape, 1.0, shape.shape)


def _trunc_exp(beta, u):
    """Inverse CDF of the density proportional to exp(beta r) on [-1, 1]."""
    ab = np.abs(beta)
    small = ab < 1e-12
    safe = np.where(small, 1.0, ab)
    r = np.sign(beta) * (1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * safe)) / safe)
    return np.where(small, 2.0 * u - 1.0, r)


RHO_REJECTION_ROUNDS = 200


def _draw_rho(st: SuffStats, tau2, rho_current, rng, stationary: bool, counters: dict | None = None):
    """rho | x, tau2 under the U[-1, 1] prior.

    Without the stationary initial law the conditional is N(cross / prev_sq,
    tau2 / prev_sq) truncated to [-1, 1].  The stationary law multiplies it by
    sqrt(1 - rho^2) exp(-(1 - rho^2) x0^2 / (2 tau2)); the exponential part
    folds into the Gaussian and the square root is handled by rejection.
    Draws still pending after ``RHO_REJECTION_ROUNDS`` rounds (mass piled
    against +-1) take one independence Metropolis step from ``rho_current``
    instead, which leaves the conditional invariant.
    """
    shape = np.broadcast_shapes(np.shape(st.cross), np.shape(tau2), np.shape(rho_current))
    tau2 = np.broadcast_to(np.asarray(tau2, float), shape).ravel()
    prec = np.broadcast_to(np.asarray(st.prev_sq - (st.x0_sq if stationary else 0.0), float), shape).ravel()
    cross = np.broadcast_to(np.asarray(st.cross, float), shape).ravel()
    cur = np.broadcast_to(np.asarray(rho_current, float), shape).ravel()
    gauss = prec > 1e-12 * np.maximum(np.abs(cross), 1.0)
    loc = np.where(gauss, cross / np.where(gauss, prec, 1.0), 0.0)
    sc = np.sqrt(tau2 / np.where(gauss, prec, 1.0))
    beta = cross / tau2

    def propose(idx):
        cand = np.empty(idx.size)
        g = gauss[idx]
        if np.any(g):
            gi = idx[g]
            cand[g] = sps.truncnorm.rvs((-1.0 - loc[gi]) / sc[gi], (1.0 - loc[gi]) / sc[gi], loc=loc[gi],
                                        scale=sc[gi], size=gi.size, random_state=rng)
        if np.any(~g):
            cand[~g] = _trunc_exp(beta[idx[~g]], rng.random(int((~g).sum())))
        return np.clip(cand, -1.0, 1.0)

    out = np.empty(cur.size)
    pending = np.arange(cur.size)
    for _ in range(RHO_REJECTION_ROUNDS if stationary else 1):
        if pending.size == 0:
            break
        cand = propose(pending)
        if stationary:
            ok = np.log(rng.random(pending.size)) < 0.5 * np.log1p(-cand * cand)
        else:
            ok = np.ones(pending.size, dtype=bool)
        out[pending[ok]] = cand[ok]
        pending = pending[~ok]
    if pending.size:
        cand = propose(pending)
        with np.errstate(divide="ignore"):
            la = 0.5 * (np.log1p(-cand * cand) - np.log1p(-cur[pending] ** 2))
        take = np.log(rng.random(pending.size)) < la
        out[pending] = np.where(take, cand, cur[pending])
        if counters is not None:
            counters["rho_mh_fallbacks"] = counters.get("rho_mh_fallbacks", 0) + int(pending.size)
    return out.reshape(shape) if shape else float(out[0])


def gibbs_arrays(st: SuffStats, prior: PriorSpec, rho, tau2, sigma2, free_mask, rng,
                 stationary: bool = True, counters: dict | None = None):
    """One Gibbs sweep sigma2 -> tau2 -> rho; array arguments are per particle."""
    free = dict(zip(PARAM_NAMES, free_mask))
    n = st.n
    if free["sigma2"]:
        sigma2 = _draw_ig(prior.c + 0.5 * (n + 1), prior.d + 0.5 * st.resid_sq, rng)
    if free["tau2"]:
        q = st.trans_sq(rho)
        if stationary:
            q = q + (1.0 - np.square(rho)) * st.x0_sq
            shape = prior.a + 0.5 * (n + 1)
        else:
            shape = prior.a + 0.5 * n
        tau2 = _draw_ig(shape, prior.b + 0.5 * q, rng)
    if free["rho"]:
        rho = _draw_rho(st, tau2, rho, rng, stationary, counters)
    return rho, tau2, sigma2


def lg_theta_conditionals(path, y, prior: PriorSpec, theta: Theta, rng: np.random.Generator,
                          init_var: float | None = None) -> Theta:
    """Draw the free components of ``theta`` from their full conditionals given a path.

    ``init_var=None`` means the stationary initial law, whose dependence on
    (rho, tau2) enters the conditionals; otherwise X_0 ~ N(0, init_var).
    """
    x = path.states if isinstance(path, Trajectory) else np.asarray(path, dtype=float)
    st = SuffStats.from_path(x, y)
    r, t2, s2 = gibbs_arrays(st, prior, theta.rho, theta.tau2, theta.sigma2, theta.free_mask, rng,
                             stationary=init_var is None)
    return theta.with_values(np.array([float(r), float(t2), float(s2)]))


# --- chains ---------------------------------------------------------------


@dataclass
class ChainRecord:
    """MCMC output.  Row 0 is the initial state.

    For PMMH each row i >= 1 also stores the proposed point, its estimate
    and the log-uniform used, so every decision can be recomputed.
    """

    thetas: np.ndarray
    loglik_hat: np.ndarray
    accepted: np.ndarray
    free_mask: tuple[bool, bool, bool]
    proposed: np.ndarray | None = None
    proposed_loglik: np.ndarray | None = None
    log_u: np.ndarray | None = None
    log_target: np.ndarray | None = None
    proposed_log_target: np.ndarray | None = None
    paths: list[np.ndarray] | None = None
    info: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted[1:])) if self.accepted.size > 1 else float("nan")

    def component(self, name: str, burn: int = 0) -> np.ndarray:
        return self.thetas[burn:, PARAM_NAMES.index(name)]

    def posterior_mean(self, name: str, burn: int = 0) -> float:
        return float(np.mean(self.component(name, burn)))

    def mcse(self, name: str, burn: int = 0) -> float:
        return batch_means_se(self.component(name, burn))

    def recompute_decisions(self) -> np.ndarray:
        """Accept/reject decisions re-derived from the stored targets."""
        la = self.proposed_log_target[1:] - self.log_target[:-1]
        return np.concatenate([[True], self.log_u[1:] < la])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "rho", "tau2", "sigma2", "loglik_hat", "accepted"])
            for i, (th, ll, acc) in enumerate(zip(self.thetas, self.loglik_hat, self.accepted)):
                wr.writerow([i, repr(float(th[0])), repr(float(th[1])), repr(float(th[2])),
                             repr(float(ll)), int(bool(acc))])


def batch_means_se(x, n_batches: int | None = None) -> float:
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n = x.size
    b = n_batches or max(int(math.sqrt(n)), 2)
    m = n // b
    if m < 1:
        raise ValueError("chain too short for batch means")
    means = x[: m * b].reshape(b, m).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(b))


# --- PMMH -----------------------------------------------------------------


def _to_u(theta: Theta) -> np.ndarray:
    return np.array([math.atanh(theta.rho), math.log(theta.tau2), math.log(theta.sigma2)])


def _from_u(u, theta: Theta) -> Theta:
    return theta.with_values(np.array([math.tanh(u[0]), math.exp(u[1]), math.exp(u[2])]))


def _log_jac(theta: Theta) -> float:
    # d(rho, tau2, sigma2)/d(u) on the free components
    terms = {"rho": math.log1p(-theta.rho**2), "tau2": math.log(theta.tau2), "sigma2": math.log(theta.sigma2)}
    return sum(terms[n] for n in theta.free_names)


@dataclass(frozen=True)
class RandomWalk:
    """Gaussian random walk in (atanh rho, log tau2, log sigma2) on the free components."""

    scale: float = 0.1
    cov: np.ndarray | None = None

    def chol(self, k: int) -> np.ndarray:
        if self.cov is None:
            return self.scale * np.eye(k)
        return np.linalg.cholesky(np.asarray(self.cov, dtype=float))

    def logpdf(self, u_to, u_from, L) -> float:
        z = np.linalg.solve(L, u_to - u_from)
        return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * z.size * math.log(2 * math.pi))


def pmmh(y, prior: PriorSpec, iters: int, N: int = 100, theta0: Theta | None = None,
         free_mask=(True, False, True), base: Theta | None = None, proposal: RandomWalk = RandomWalk(),
         backend: str = "particle", seed=0, model: ModelContract | None = None,
         options: FilterOptions = FilterOptions(), sample_paths: bool = False,
         explicit_q: bool = False, init_var: float | None = None) -> ChainRecord:
    """Particle marginal Metropolis-Hastings.

    The chain lives in unconstrained coordinates, so the target includes the
    log-Jacobian of the transform.  The accepted log-likelihood estimate is
    cached and reused; the filter is never re-run at the current state.
    ``backend="exact"`` replaces the particle estimate by the Kalman value.
    Iteration i uses stream family ``child(i)``; ``child(0)`` draws the
    initial state when ``theta0`` is None.
    """
    if iters < 1 or N < 1:
        raise ValueError("iters and N must be >= 1")
    if backend not in ("particle", "exact"):
        raise ValueError(f"unknown backend {backend!r}")
    y = np.asarray(y, dtype=float)
    streams = as_streams(seed)
    model = LinearGaussian(init_var=init_var) if model is None else model
    base = base if base is not None else Theta(0.5, 1.0, 1.0)
    base = Theta(base.rho, base.tau2, base.sigma2, tuple(free_mask))
    theta = theta0 if theta0 is not None else prior.sample(streams.child(0).generator(), base)
    theta = Theta(theta.rho, theta.tau2, theta.sigma2, base.free_mask)
    free = theta.free_index
    L = proposal.chol(free.size)

    def loglik(th: Theta, st) -> tuple[float, np.ndarray | None]:
        if backend == "exact":
            return float(kalman_loglik(th.rho, th.tau2, th.sigma2, y, init_var=init_var)), None
        out = run_filter(model, th, y, N, options, st, store_trajectories=sample_paths)
        path = None
        if sample_paths:
            j = sample_categorical(out.systems[-1].norm_weights, 1, st.generator())[0]
            path = out.trajectories[:, j].copy()
        return out.loglik, path

    def target(th: Theta, ll: float) -> float:
        return ll + prior.logpdf(th) + _log_jac(th)

    ll, path = loglik(theta, streams.child(0))
    cur_t = target(theta, ll)
    rows = [theta.as_array()]
    lls = [ll]
    acc = [True]
    props = [theta.as_array()]
    prop_ll = [ll]
    log_us = [0.0]
    cur_targets = [cur_t]
    prop_targets = [cur_t]
    paths = [path] if sample_paths else None
    collapses = 0
    for i in range(1, iters + 1):
        st = streams.child(i)
        g = st.generator()
        u = _to_u(theta)
        u_new = u.copy()
        u_new[free] = u[free] + L @ g.standard_normal(free.size)
        log_u = math.log(g.random())
        try:
            cand = _from_u(u_new, theta)
            if cand.on_boundary() and not (init_var is not None and cand.on_boundary() == ("rho",)):
                raise FloatingPointError("proposal on the parameter boundary")
            ll_new, path_new = loglik(cand, st)
            t_new = target(cand, ll_new)
        except (ParticleCollapse, FloatingPointError, ValueError) as exc:
            collapses += 1
            log.debug("iteration %d: proposal rejected (%s)", i, exc)
            cand, ll_new, path_new, t_new = _from_u(u_new, theta), -np.inf, None, -np.inf
        log_alpha = t_new - cur_t
        if explicit_q:
            log_alpha += proposal.logpdf(u[free], u_new[free], L) - proposal.logpdf(u_new[free], u[free], L)
        ok = bool(log_u < log_alpha)
        props.append(cand.as_array())
        prop_ll.append(ll_new)
        log_us.append(log_u)
        prop_targets.append(t_new)
        if ok:
            theta, ll, cur_t, path = cand, ll_new, t_new, path_new
        rows.append(theta.as_array())
        lls.append(ll)
        acc.append(ok)
        cur_targets.append(cur_t)
        if sample_paths:
            paths.append(path)
    return ChainRecord(np.array(rows), np.array(lls), np.array(acc), base.free_mask, np.array(props),
                       np.array(prop_ll), np.array(log_us), np.array(cur_targets), np.array(prop_targets),
                       paths, {"N": N, "backend": backend, "collapsed_proposals": collapses,
                               "proposal_scale": proposal.scale})


@dataclass
class TuneResult:
    N: int
    sd_table: dict[int, float]
    warning: bool


def choose_n(sd_table: dict[int, float], target: float = PMMH_SD_TARGET) -> TuneResult:
    """Smallest N whose sd(log p_hat) <= target, else the largest with a warning."""
    if not sd_table:
        raise ValueError("candidate_Ns must be non-empty")
    for n in sorted(sd_table):
        if sd_table[n] <= target:
            return TuneResult(n, dict(sd_table), False)
    n = max(sd_table)
    log.warning("no candidate N reaches sd(log p_hat) <= %.2f; using N=%d", target, n)
    return TuneResult(n, dict(sd_table), True)


def tune_pmmh_n(y, theta_pilot: Theta, candidate_Ns, replicates: int = 50, seed=0, backend: str = "particle",
                model: ModelContract | None = None, options: FilterOptions = FilterOptions(),
                target: float = PMMH_SD_TARGET) -> TuneResult:
    """Measure sd of log p_hat at ``theta_pilot`` for each candidate N and apply :func:`choose_n`."""
    cands = sorted(set(int(n) for n in candidate_Ns))
    if not cands:
        raise ValueError("candidate_Ns must be non-empty")
    model = LinearGaussian() if model is None else model
    streams = as_streams(seed)
    table = {}
    for n in cands:
        if backend == "exact":
            table[n] = 0.0
            continue
        vals = [run_filter(model, theta_pilot, y, n, options, streams.child(n * 100_003 + r)).loglik
                for r in range(replicates)]
        table[n] = float(np.std(vals, ddof=1))
    return choose_n(table, target)


# --- conditional SMC and particle Gibbs -----------------------------------


def csmc(model: ModelContract, theta, y, N: int, reference, rng: np.random.Generator,
         options: FilterOptions = FilterOptions()) -> FilterOutput:
    """Conditional SMC: slot 0 carries ``reference`` through every step.

    Slot 0 is its own ancestor at every step; the other N - 1 ancestors are
    resampled from the auxiliary weights with ``options.scheme``.
    """
    y = np.asarray(y, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if ref.shape != y.shape:
        raise ValueError("reference path must have the same length as y")
    systems = []
    x = np.asarray(model.proposal_sample(theta, y[0], None, rng, size=N), dtype=float)
    x[0] = ref[0]
    logw = np.asarray(model.log_weight(theta, y[0], None, x), dtype=float)
    w, lm = normalize_log_weights(logw, 0)
    prev = ParticleSystem(x, logw, w, np.arange(N), 0, lm, False, float(N))
    systems.append(prev)
    for n in range(1, y.size):
        with np.errstate(divide="ignore"):
            log_aux = np.log(prev.norm_weights) + model.predictive_logweight(theta, y[n], prev.positions)
        aux, lm_aux = normalize_log_weights(log_aux, n)
        anc = np.zeros(N, dtype=np.intp)
        if N > 1:
            anc[1:] = resample(aux, N - 1, options.scheme, rng)
        x_prev = prev.positions[anc]
        x = np.asarray(model.proposal_sample(theta, y[n], x_prev, rng), dtype=float)
        x[0] = ref[n]
        logw = np.asarray(model.log_weight(theta, y[n], x_prev, x), dtype=float)
        w, lm = normalize_log_weights(logw, n)
        incr = lm_aux + lm + math.log(N)
        prev = ParticleSystem(x, logw, w, anc, n, incr, True, ess(aux))
        systems.append(prev)
    return FilterOutput(systems, np.array([s.loglik_increment for s in systems]), N,
                        getattr(model, "kind", "custom"), options)


def pgibbs(y, prior: PriorSpec, N: int, iters: int, seed=0, base: Theta | None = None,
           free_mask=(True, False, True), theta0: Theta | None = None, init_var: float | None = None,
           model: ModelContract | None = None, keep_paths: bool = False,
           options: FilterOptions = FilterOptions()) -> ChainRecord:
    """Particle Gibbs with backward sampling.

    Each iteration draws theta from its conditionals given the current
    path, runs conditional SMC at the new theta with that path as reference
    and draws a fresh path by backward sampling.
    """
    y = np.asarray(y, dtype=float)
    streams = as_streams(seed)
    model = LinearGaussian(init_var=init_var) if model is None else model
    base = base if base is not None else Theta(0.5, 1.0, 1.0)
    base = Theta(base.rho, base.tau2, base.sigma2, tuple(free_mask))
    g0 = streams.child(0).generator()
    theta = theta0 if theta0 is not None else prior.sample(g0, base)
    theta = Theta(theta.rho, theta.tau2, theta.sigma2, base.free_mask)
    out0 = run_filter(model, theta, y, max(N, 1), options, streams.child(0))
    path = ffbsa_sample(out0, theta, 1, "direct", g0, model).paths[:, 0]
    rows = [theta.as_array()]
    paths = [path.copy()] if keep_paths else None
    path_sum = np.zeros_like(path)
    for i in range(1, iters + 1):
        g = streams.child(i).generator()
        theta = lg_theta_conditionals(path, y, prior, theta, g, init_var)
        out = csmc(model, theta, y, N, path, g, options)
        path = ffbsa_sample(out, theta, 1, "direct", g, model).paths[:, 0]
        rows.append(theta.as_array())
        path_sum += path
        if keep_paths:
            paths.append(path.copy())
    rows = np.array(rows)
    return ChainRecord(rows, np.full(rows.shape[0], np.nan), np.ones(rows.shape[0], dtype=bool),
                       base.free_mask, paths=paths,
                       info={"N": N, "last_path": path, "path_mean": path_sum / max(iters, 1)})


# --- MCMC within SMC ------------------------------------------------------


@dataclass
class ThetaArrays:
    """Per-particle parameter values."""

    rho: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray

    def take(self, idx) -> "ThetaArrays":
        return ThetaArrays(self.rho[idx], self.tau2[idx], self.sigma2[idx])

    def stack(self) -> np.ndarray:
        return np.column_stack([self.rho, self.tau2, self.sigma2])


@dataclass
class SmcParamOutput:
    """Per-time summaries of the particle approximation of p(theta | y_{0:n})."""

    mean: np.ndarray  # (T+1, 3)
    var: np.ndarray  # (T+1, 3)
    loglik: np.ndarray  # cumulative log p_hat(y_{0:n})
    unique_theta: np.ndarray
    unique_ancestors: np.ndarray
    variant: str
    proposal: str
    refresh: bool
    final_theta: np.ndarray | None = None
    final_weights: np.ndarray | None = None
    counters: dict = field(default_factory=dict)


def mcmc_within_smc(y, prior: PriorSpec, N: int, seed=0, base: Theta | None = None,
                    free_mask=(False, True, True), proposal: str = "bootstrap", refresh: bool = True,
                    init_var: float | None = None) -> SmcParamOutput:
    """Particle filter on (x_n, theta) with a Gibbs refresh of theta from sufficient statistics.

    The refresh is applied to an equally weighted particle set: right after
    resampling for the bootstrap proposal, and after propagation for the
    fully adapted (``"optimal"``) proposal, whose post-propagation weights
    are uniform.  Randomness for step n comes from ``streams.step(n)``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    y = np.asarray(y, dtype=float)
    streams = as_streams(seed)
    model = LinearGaussian(proposal, init_var)
    stationary = init_var is None
    base = base if base is not None else Theta(0.5, 1.0, 1.0)
    if stationary and abs(base.rho) >= 1.0 and not free_mask[0]:
        raise ValueError("a fixed |rho| = 1 needs an explicit init_var")
    mask = tuple(bool(f) for f in free_mask)
    variant = stats_variant(mask)
    T = y.size - 1
    mean = np.empty((T + 1, 3))
    var = np.empty((T + 1, 3))
    loglik = np.empty(T + 1)
    uniq_th = np.empty(T + 1, dtype=np.int64)
    uniq_anc = np.empty(T + 1, dtype=np.int64)

    counters: dict = {}
    rng = streams.step(0)
    vals = {n: np.full(N, getattr(base, n)) for n in PARAM_NAMES}
    for n, f in zip(PARAM_NAMES, mask):
        if f:
            vals[n] = prior.sample_component(n, rng, N)
    th = ThetaArrays(vals["rho"], vals["tau2"], vals["sigma2"])
    x = np.asarray(model.proposal_sample(th, y[0], None, rng, size=N), dtype=float)
    logw = np.asarray(model.log_weight(th, y[0], None, x), dtype=float)
    w, lm = normalize_log_weights(logw, 0)
    st = SuffStats.start(x, y[0])
    ll = lm

    def record(n, w, anc):
        arr = th.stack()
        m = w @ arr
        mean[n] = m
        var[n] = w @ (arr - m) ** 2
        loglik[n] = ll
        free_cols = arr[:, [i for i, f in enumerate(mask) if f]] if any(mask) else arr[:, :1]
        uniq_th[n] = np.unique(free_cols, axis=0).shape[0]
        uniq_anc[n] = np.unique(anc).size

    record(0, w, np.arange(N))
    adapted = proposal == "optimal"
    for n in range(1, T + 1):
        rng = streams.step(n)
        with np.errstate(divide="ignore"):
            log_aux = np.log(w) + model.predictive_logweight(th, y[n], x)
        aux, lm_aux = normalize_log_weights(log_aux, n)
        anc = resample(aux, N, "multinomial", rng)
        x_prev = x[anc]
        th = th.take(anc)
        st = st.take(anc)
        if refresh and not adapted:
            th = ThetaArrays(*gibbs_arrays(st, prior, th.rho, th.tau2, th.sigma2, mask, rng, stationary, counters))
        x = np.asarray(model.proposal_sample(th, y[n], x_prev, rng), dtype=float)
        logw = np.asarray(model.log_weight(th, y[n], x_prev, x), dtype=float)
        w, lm = normalize_log_weights(logw, n)
        ll += lm_aux + math.log(N) + lm
        st = st.update(x_prev, x, y[n])
        if refresh and adapted:
            th = ThetaArrays(*gibbs_arrays(st, prior, th.rho, th.tau2, th.sigma2, mask, rng, stationary, counters))
        record(n, w, anc)
    return SmcParamOutput(mean, var, loglik, uniq_th, uniq_anc, variant, proposal, refresh,
                          th.stack(), w, counters)


def degeneracy_table(outputs: list[SmcParamOutput], post_var_tau2: np.ndarray | None = None,
                     times=None) -> dict[str, np.ndarray]:
    """Cross-replicate diagnostics at ``times`` (default: every n)."""
    means = np.array([o.mean[:, 1] for o in outputs])
    lls = np.array([o.loglik for o in outputs])
    times = np.arange(means.shape[1]) if times is None else np.asarray(times)
    rv = np.var(means[:, times], axis=0, ddof=1) if len(outputs) > 1 else np.zeros(times.size)
    if post_var_tau2 is not None:
        rv = rv / np.asarray(post_var_tau2)
    else:
        rv = np.full(times.size, np.nan)
    return {
        "n": times,
        "unique_theta": np.mean([o.unique_theta[times] for o in outputs], axis=0),
        "unique_ancestors": np.mean([o.unique_ancestors[times] for o in outputs], axis=0),
        "rel_var_tau2": rv,
        "var_loglik": np.var(lls[:, times], axis=0, ddof=1) if len(outputs) > 1 else np.zeros(times.size),
    }


def write_diagnostics(path, table: dict[str, np.ndarray]) -> None:
    cols = ["n", "unique_theta", "unique_ancestors", "rel_var_tau2", "var_loglik"]
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for i in range(len(table["n"])):
            wr.writerow([int(table["n"][i])] + [repr(float(table[c][i])) for c in cols[1:]])
