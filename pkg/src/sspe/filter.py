"""Auxiliary particle filter; SISR and the bootstrap filter are special cases.

Each call to :func:`filter_step` at time n >= 1 first forms the auxiliary
weights  W_bar_n^i ∝ W_{n-1}^i q(y_n | X_{n-1}^i),  resamples with them,
propagates through q(x_n | y_n, x_{n-1}) and reweights by

    w_n = g(y_n | x_n) f(x_n | x_{n-1}) / (q(x_n | y_n, x_{n-1}) q(y_n | x_{n-1})).

The likelihood increment is  log sum_i W_{n-1}^i q(y_n | X_{n-1}^i)
+ log (1/N) sum_i w_n^i,  so the filter estimate of p(y_{0:T}) is unbiased.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import ModelContract
from .particle_core import (
    ParticleSystem,
    Streams,
    as_streams,
    ess,
    normalize_log_weights,
    resample,
)


@dataclass(frozen=True)
class FilterOptions:
    """Resampling scheme and optional ESS trigger (fraction of N).

    ``ess_threshold=None`` resamples at every step.
    """

    scheme: str = "multinomial"
    ess_threshold: float | None = None


@dataclass
class FilterOutput:
    systems: list[ParticleSystem]
    loglik_increments: np.ndarray
    N: int
    proposal: str
    options: FilterOptions = field(default_factory=FilterOptions)
    trajectories: np.ndarray | None = None

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_increments))

    @property
    def horizon(self) -> int:
        return len(self.systems) - 1

    def positions(self) -> np.ndarray:
        return np.stack([s.positions for s in self.systems])

    def weights(self) -> np.ndarray:
        return np.stack([s.norm_weights for s in self.systems])

    def paths(self, n: int | None = None) -> np.ndarray:
        """Ancestral paths x_{0:n} of the particles alive at time n, shape (n+1, N)."""
        n = self.horizon if n is None else n
        return backtrack(self.systems[: n + 1])

    def filtered_means(self) -> np.ndarray:
        return np.array([s.mean() for s in self.systems])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "loglik_increment", "ess", "filtered_mean", "filtered_var"])
            for s in self.systems:
                wr.writerow([s.time_index, repr(float(s.loglik_increment)), repr(ess(s.norm_weights)),
                             repr(s.mean()), repr(s.var())])


def backtrack(systems: list[ParticleSystem]) -> np.ndarray:
    n = len(systems)
    N = systems[-1].N
    out = np.empty((n, N))
    idx = np.arange(N)
    for k in range(n - 1, -1, -1):
        out[k] = systems[k].positions[idx]
        idx = systems[k].ancestors[idx]
    return out


def filter_step(prev: ParticleSystem | None, model: ModelContract, theta, y_n: float,
                rng: np.random.Generator, *, N: int | None = None,
                options: FilterOptions = FilterOptions(), time_index: int | None = None) -> ParticleSystem:
    """Advance the particle system by one observation."""
    if prev is None:
        if N is None or N < 1:
            raise ValueError("N >= 1 required at time 0")
        n = 0 if time_index is None else time_index
        x = np.asarray(model.proposal_sample(theta, y_n, None, rng, size=N), dtype=float)
        logw = np.asarray(model.log_weight(theta, y_n, None, x), dtype=float)
        w, lmean = normalize_log_weights(logw, n)
        return ParticleSystem(x, logw, w, np.arange(N), n, lmean, False, float(N))

    n = prev.time_index + 1 if time_index is None else time_index
    N = prev.N
    with np.errstate(divide="ignore"):
        log_aux = np.log(prev.norm_weights) + model.predictive_logweight(theta, y_n, prev.positions)
    aux_w, lm_aux = normalize_log_weights(log_aux, n)
    log_z = lm_aux + np.log(N)
    ess_aux = ess(aux_w)
    do_resample = options.ess_threshold is None or ess_aux < options.ess_threshold * N
    if do_resample:
        anc = resample(aux_w, N, options.scheme, rng)
        log_prior = np.full(N, -np.log(N))
    else:
        anc = np.arange(N)
        with np.errstate(divide="ignore"):
            log_prior = np.log(aux_w)
    x_prev = prev.positions[anc]
    x = np.asarray(model.proposal_sample(theta, y_n, x_prev, rng), dtype=float)
    logw = log_prior + model.log_weight(theta, y_n, x_prev, x)
    w, lm = normalize_log_weights(logw, n)
    incr = log_z + lm + np.log(N)
    return ParticleSystem(x, logw, w, anc, n, incr, do_resample, ess_aux)


def filter_stream(model: ModelContract, theta, y, N: int, options: FilterOptions = FilterOptions(),
                  seed=0) -> Iterator[ParticleSystem]:
    """Yield the particle system at each time; O(N) memory."""
    streams = as_streams(seed)
    prev = None
    for n, yn in enumerate(np.asarray(y, dtype=float)):
        prev = filter_step(prev, model, theta, yn, streams.step(n), N=N, options=options, time_index=n)
        yield prev


def run_filter(model: ModelContract, theta, y, N: int, options: FilterOptions = FilterOptions(),
               seed=0, store_trajectories: bool = False) -> FilterOutput:
    """Full sweep over ``y`` keeping every particle system."""
    if N < 1:
        raise ValueError("N must be >= 1")
    systems = list(filter_stream(model, theta, y, N, options, seed))
    out = FilterOutput(systems, np.array([s.loglik_increment for s in systems]), N,
                       getattr(model, "kind", "custom"), options)
    if store_trajectories:
        out.trajectories = backtrack(systems)
    return out


def filter_loglik(model: ModelContract, theta, y, N: int, options: FilterOptions = FilterOptions(),
                  seed=0) -> float:
    """log p_hat(y_{0:T}) without storing the particle history."""
    return float(sum(s.loglik_increment for s in filter_stream(model, theta, y, N, options, seed)))


__all__ = [
    "FilterOptions",
    "FilterOutput",
    "Streams",
    "backtrack",
    "filter_loglik",
    "filter_step",
    "filter_stream",
    "run_filter",
]
