"""Particle estimators of smoothed additive functionals.

Streaming estimators (``*Smoother`` classes) consume one particle system at
a time and can run with a parameter that changes between steps, which the
on-line ML drivers need.  The batch functions wrap them for a stored
:class:`~sspe.filter.FilterOutput`.

Notation: the backward kernel built from a filter at time n-1 is

    B_n(j | i) ∝ W_{n-1}^j f(X_n^i | X_{n-1}^j),

i.e. row i of an (N, N) matrix holds the law of the time n-1 ancestor of
particle i at time n.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .filter import FilterOutput
from .functionals import AdditiveFunctional, QuadraticFunctional
from .model import LinearGaussian, ModelContract
from .particle_core import ParticleSystem, logsumexp, sample_categorical

REJECTION_CAP_FACTOR = 100


class UnreachableParticle(RuntimeError):
    def __init__(self, n, j):
        self.time_index, self.particle = n, j
        super().__init__(f"unreachable particle {j} at time {n}: backward normalizer is zero")


def _model(model):
    return LinearGaussian() if model is None else model


def backward_log_kernel(prev: ParticleSystem, cur: ParticleSystem, model: ModelContract, theta) -> np.ndarray:
    """Row-normalized log B_n, shape (N_cur, N_prev)."""
    with np.errstate(divide="ignore"):
        logw = np.log(prev.norm_weights)
    lk = logw[None, :] + model.trans_logpdf(theta, cur.positions[:, None], prev.positions[None, :])
    norm = logsumexp(lk, axis=1)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        raise UnreachableParticle(cur.time_index, int(bad[0]))
    return lk - norm[:, None]


def _expected_terms(s: AdditiveFunctional, B: np.ndarray, k: int, x_prev: np.ndarray, x: np.ndarray,
                    y, theta) -> np.ndarray:
    """Row i: sum_j B[i, j] s_k(x_prev[j], x[i])."""
    if isinstance(s, QuadraticFunctional):
        e1 = B @ x_prev
        e2 = B @ (x_prev * x_prev)
        mono = np.column_stack([e2, x * e1, x * x, e1, x, np.ones_like(x)])
        return mono @ np.asarray(s.coeffs(k, y, theta), dtype=float).T
    terms = s.term(k, x_prev[None, :], x[:, None], y, theta)
    return np.einsum("ij,ijd->id", B, terms)


# --- streaming smoothers -------------------------------------------------


class _Streaming:
    """Common bookkeeping: per-time estimates collected in ``history``."""

    def __init__(self, s: AdditiveFunctional, model: ModelContract | None = None, record: bool = True):
        self.s = s
        self.model = _model(model)
        self.record = record
        self.history: list[np.ndarray] = []
        self.system: ParticleSystem | None = None

    def _push(self) -> np.ndarray:
        est = self.estimate()
        if self.record:
            self.history.append(est)
        return est

    def estimates(self) -> np.ndarray:
        return np.array(self.history).reshape(len(self.history), self.s.dim)

    def estimate(self) -> np.ndarray:
        raise NotImplementedError


class PathSpaceSmoother(_Streaming):
    """Accumulates s along surviving ancestral paths; O(N) per step.

    With ``gamma`` passed to :meth:`update` the accumulation becomes the
    convex recursion A <- (1 - gamma) A[anc] + gamma s used by on-line EM.
    """

    def start(self, system: ParticleSystem, y0, theta, gamma: float | None = None):
        self.system = system
        if gamma is None:
            self.acc = self.s.initial(system.positions, y0, theta)
        else:
            self.acc = np.zeros((system.N, self.s.dim))
        return self._push()

    def update(self, system: ParticleSystem, y_n, theta, gamma: float | None = None):
        anc = system.ancestors
        x_prev = self.system.positions[anc]
        t = self.s.term(system.time_index, x_prev, system.positions, y_n, theta)
        if gamma is None:
            self.acc = self.acc[anc] + t
        else:
            self.acc = (1.0 - gamma) * self.acc[anc] + gamma * t
        self.system = system
        return self._push()

    def estimate(self):
        return self.system.norm_weights @ self.acc


class FixedLagSmoother(_Streaming):
    """Term s_k frozen with the weights at time k + L; O(N L) memory."""

    def __init__(self, s, lag: int, model=None, record: bool = True):
        if lag < 0:
            raise ValueError("lag must be >= 0")
        super().__init__(s, model, record)
        self.lag = int(lag)

    def start(self, system, y0, theta):
        self.system = system
        self.frozen = np.zeros(self.s.dim)
        self.buffer = [self.s.initial(system.positions, y0, theta)]
        self._freeze()
        return self._push()

    def _freeze(self):
        if len(self.buffer) > self.lag:
            self.frozen = self.frozen + self.system.norm_weights @ self.buffer.pop(0)

    def update(self, system, y_n, theta):
        anc = system.ancestors
        x_prev = self.system.positions[anc]
        self.buffer = [b[anc] for b in self.buffer]
        self.buffer.append(self.s.term(system.time_index, x_prev, system.positions, y_n, theta))
        self.system = system
        self._freeze()
        return self._push()

    def estimate(self):
        w = self.system.norm_weights
        return self.frozen + sum((w @ b for b in self.buffer), np.zeros(self.s.dim))


class ForwardSmoother(_Streaming):
    """Forward-only O(N^2) recursion for V_n(X_n^i).

    V_n(X_n^i) = sum_j B_n(j|i) {b V_{n-1}(X_{n-1}^j) + a s_n(X_{n-1}^j, X_n^i)}
    with (a, b) = (1, 1), or (gamma, 1 - gamma) when ``gamma`` is given.
    """

    def start(self, system, y0, theta, gamma: float | None = None):
        self.system = system
        if gamma is None:
            self.V = self.s.initial(system.positions, y0, theta)
        else:
            self.V = np.zeros((system.N, self.s.dim))
        return self._push()

    def update(self, system, y_n, theta, gamma: float | None = None):
        prev = self.system
        B = np.exp(backward_log_kernel(prev, system, self.model, theta))
        et = _expected_terms(self.s, B, system.time_index, prev.positions, system.positions, y_n, theta)
        carried = B @ self.V
        if gamma is None:
            self.V = carried + et
        else:
            self.V = (1.0 - gamma) * carried + gamma * et
        self.system = system
        return self._push()

    def estimate(self):
        return self.system.norm_weights @ self.V


class ParisSmoother(_Streaming):
    """K-sample Monte Carlo version of the forward recursion.

    Backward indices are drawn by rejection against the filter weights with
    the transition-density bound, falling back to exact categorical draws
    after ``REJECTION_CAP_FACTOR * N`` proposals.
    """

    def __init__(self, s, K: int, rng: np.random.Generator, model=None, record: bool = True,
                 mode: str = "rejection"):
        if K < 1:
            raise ValueError("K must be >= 1")
        super().__init__(s, model, record)
        self.K = int(K)
        self.rng = rng
        self.mode = mode
        self.fallbacks = 0

    def start(self, system, y0, theta):
        self.system = system
        self.V = self.s.initial(system.positions, y0, theta)
        return self._push()

    def update(self, system, y_n, theta):
        prev = self.system
        N = system.N
        x_next = np.repeat(system.positions, self.K)
        idx, fb = backward_indices(prev, x_next, self.model, theta, self.rng, self.mode)
        self.fallbacks += fb
        xp = prev.positions[idx]
        t = self.s.term(system.time_index, xp, x_next, y_n, theta)
        self.V = (self.V[idx] + t).reshape(N, self.K, self.s.dim).mean(axis=1)
        self.system = system
        return self._push()

    def estimate(self):
        return self.system.norm_weights @ self.V


# --- backward sampling ----------------------------------------------------


def backward_indices(prev: ParticleSystem, x_next: np.ndarray, model: ModelContract, theta,
                     rng: np.random.Generator, mode: str = "direct",
                     cap_factor: int = REJECTION_CAP_FACTOR) -> tuple[np.ndarray, int]:
    """Draw ancestor indices J_m ~ W^j f(x_next[m] | X^j) for every m.

    Returns the indices and the number of draws that hit the rejection cap
    and fell back to the direct sampler.
    """
    x_next = np.asarray(x_next, dtype=float)
    M = x_next.size
    if mode == "direct":
        return _direct_backward(prev, x_next, model, theta, rng), 0
    if mode != "rejection":
        raise ValueError(f"unknown backward sampling mode {mode!r}")
    log_c = model.trans_log_bound(theta)
    if log_c is None:
        raise ValueError("rejection sampling needs a bound on the transition density")
    N = prev.N
    out = np.empty(M, dtype=np.intp)
    pending = np.arange(M)
    attempts = 0
    cap = cap_factor * N
    while pending.size and attempts < cap:
        # b i.i.d. proposals per pending draw; the first accepted one is kept,
        # so the law is that of sequential rejection with the same per-draw cap
        b = int(min(cap - attempts, max(1, -(-N // pending.size))))
        prop = sample_categorical(prev.norm_weights, pending.size * b, rng).reshape(pending.size, b)
        log_acc = model.trans_logpdf(theta, x_next[pending, None], prev.positions[prop]) - log_c
        if np.any(log_acc > 1e-12):
            raise AssertionError("transition density exceeds its declared bound")
        acc = np.log(rng.random(prop.shape)) < log_acc
        hit = acc.any(axis=1)
        first = np.argmax(acc, axis=1)
        out[pending[hit]] = prop[hit, first[hit]]
        pending = pending[~hit]
        attempts += b
    if pending.size:
        out[pending] = _direct_backward(prev, x_next[pending], model, theta, rng)
    return out, int(pending.size)


def _direct_backward(prev, x_next, model, theta, rng):
    with np.errstate(divide="ignore"):
        logw = np.log(prev.norm_weights)
    lk = logw[None, :] + model.trans_logpdf(theta, x_next[:, None], prev.positions[None, :])
    norm = logsumexp(lk, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise UnreachableParticle(prev.time_index + 1, int(np.flatnonzero(~np.isfinite(norm[:, 0]))[0]))
    cdf = np.cumsum(np.exp(lk - norm), axis=1)
    u = rng.random((x_next.size, 1)) * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), prev.N - 1)


@dataclass
class BackwardSample:
    paths: np.ndarray  # (T+1, M)
    indices: np.ndarray  # (T+1, M) particle index at each time
    fallbacks: int


def ffbsa_sample(filt: FilterOutput | list[ParticleSystem], theta, M: int, mode: str = "direct",
                 rng: np.random.Generator | None = None, model: ModelContract | None = None) -> BackwardSample:
    """Forward-filtering backward-sampling of M paths."""
    model = _model(model)
    rng = np.random.default_rng() if rng is None else rng
    systems = filt.systems if isinstance(filt, FilterOutput) else list(filt)
    if mode == "rejection" and model.trans_log_bound(theta) is None:
        raise ValueError("rejection mode needs a bound on the transition density")
    T = len(systems) - 1
    idx = np.empty((T + 1, M), dtype=np.intp)
    paths = np.empty((T + 1, M))
    idx[T] = sample_categorical(systems[T].norm_weights, M, rng)
    paths[T] = systems[T].positions[idx[T]]
    fallbacks = 0
    for n in range(T - 1, -1, -1):
        idx[n], fb = backward_indices(systems[n], paths[n + 1], model, theta, rng, mode)
        fallbacks += fb
        paths[n] = systems[n].positions[idx[n]]
    return BackwardSample(paths, idx, fallbacks)


# --- batch wrappers -------------------------------------------------------


def _systems(filt) -> list[ParticleSystem]:
    return filt.systems if isinstance(filt, FilterOutput) else list(filt)


def _drive(smoother, systems: Iterable[ParticleSystem], y, theta) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    it = iter(systems)
    first = next(it)
    smoother.start(first, y[first.time_index], theta)
    for sys in it:
        smoother.update(sys, y[sys.time_index], theta)
    return smoother.estimates()


def pathspace_additive(filt: FilterOutput, s: AdditiveFunctional, y, theta=None) -> np.ndarray:
    """Per-time path-space estimates, shape (T+1, dim)."""
    if not isinstance(filt, FilterOutput) or filt.trajectories is None:
        raise ValueError("path-space smoothing needs a filter run with trajectory storage")
    return _drive(PathSpaceSmoother(s), filt.systems, y, theta)


def fixedlag_additive(filt, s: AdditiveFunctional, lag: int, y, theta=None) -> np.ndarray:
    return _drive(FixedLagSmoother(s, lag), _systems(filt), y, theta)


def forward_smooth(filt, theta, s: AdditiveFunctional, y, model=None) -> np.ndarray:
    return _drive(ForwardSmoother(s, model), _systems(filt), y, theta)


def paris_additive(filt, theta, s: AdditiveFunctional, y, K: int, rng: np.random.Generator,
                   model=None, mode: str = "rejection") -> np.ndarray:
    return _drive(ParisSmoother(s, K, rng, model, mode=mode), _systems(filt), y, theta)


def ffbsm_weights(filt, theta, model=None) -> np.ndarray:
    """Marginal smoothing weights W_{n|T}, shape (T+1, N), computed in log space."""
    model = _model(model)
    systems = _systems(filt)
    T = len(systems) - 1
    N = systems[-1].N
    with np.errstate(divide="ignore"):
        logW = np.empty((T + 1, N))
        logW[T] = np.log(systems[T].norm_weights)
        for n in range(T - 1, -1, -1):
            prev, cur = systems[n], systems[n + 1]
            lf = model.trans_logpdf(theta, cur.positions[None, :], prev.positions[:, None])  # (i, j)
            lw = np.log(prev.norm_weights)
            log_den = logsumexp(lw[:, None] + lf, axis=0)  # per j
            live = np.isfinite(logW[n + 1])
            dead = live & ~np.isfinite(log_den)
            if np.any(dead):
                raise UnreachableParticle(n + 1, int(np.flatnonzero(dead)[0]))
            contrib = logW[n + 1][None, live] + lf[:, live] - log_den[None, live]
            logW[n] = lw + logsumexp(contrib, axis=1)
    W = np.exp(logW)
    return W / W.sum(axis=1, keepdims=True)


def ffbsm_pair_law(filt, theta, n: int, smooth_w: np.ndarray | None = None, model=None) -> np.ndarray:
    """P_n(i, j): joint smoothing law of (X_{n-1}^i, X_n^j), shape (N, N)."""
    model = _model(model)
    systems = _systems(filt)
    if smooth_w is None:
        smooth_w = ffbsm_weights(systems, theta, model)
    B = np.exp(backward_log_kernel(systems[n - 1], systems[n], model, theta))  # (j, i)
    return (B * smooth_w[n][:, None]).T


def ffbsm_additive(filt, theta, s: AdditiveFunctional, y, model=None) -> np.ndarray:
    """Forward-filtering backward-smoothing estimate of S_T."""
    model = _model(model)
    systems = _systems(filt)
    y = np.asarray(y, dtype=float)
    W = ffbsm_weights(systems, theta, model)
    total = W[0] @ s.initial(systems[0].positions, y[0], theta)
    for n in range(1, len(systems)):
        prev, cur = systems[n - 1], systems[n]
        B = np.exp(backward_log_kernel(prev, cur, model, theta))
        et = _expected_terms(s, B, n, prev.positions, cur.positions, y[n], theta)
        total = total + W[n] @ et
    return total


def write_trace(path, traces: dict[str, np.ndarray], labels: dict[str, tuple[str, ...]] | None = None) -> None:
    """CSV ``n,estimator,component,value`` for per-time estimator traces."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "estimator", "component", "value"])
        for name, arr in traces.items():
            arr = np.asarray(arr).reshape(len(arr), -1)
            comp = labels.get(name) if labels else None
            for n, row in enumerate(arr):
                for d, v in enumerate(row):
                    wr.writerow([n, name, comp[d] if comp else d, repr(float(v))])


def log_bound_gaussian(tau2: float) -> float:
    return -0.5 * math.log(2.0 * math.pi * tau2)
