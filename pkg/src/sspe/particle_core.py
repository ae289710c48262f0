"""Weight bookkeeping, effective sample size, resampling and RNG streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RESAMPLING_SCHEMES = ("multinomial", "systematic")


class ParticleCollapse(RuntimeError):
    """All particle weights are zero (log weight -inf)."""

    def __init__(self, time_index=None, detail: str = ""):
        self.time_index = time_index
        where = f" at time {time_index}" if time_index is not None else ""
        super().__init__(f"particle collapse{where}{': ' + detail if detail else ''}")


@dataclass
class ParticleSystem:
    """Particle approximation at one time step.

    ``ancestors[i]`` is the index in the previous system that particle ``i``
    was propagated from (zero-based); at time 0 it is the identity.
    ``loglik_increment`` is log p_hat(y_n | y_{0:n-1}) and ``resampled``
    records whether a resampling step preceded the propagation.
    """

    positions: np.ndarray
    log_weights: np.ndarray
    norm_weights: np.ndarray
    ancestors: np.ndarray
    time_index: int
    loglik_increment: float = 0.0
    resampled: bool = True
    ess_before: float = float("nan")

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    def mean(self) -> float:
        return float(np.dot(self.norm_weights, self.positions))

    def var(self) -> float:
        m = self.mean()
        return float(np.dot(self.norm_weights, (self.positions - m) ** 2))


def normalize_log_weights(logw, time_index=None) -> tuple[np.ndarray, float]:
    """Softmax of ``logw`` and log((1/N) sum exp(logw)), computed stably."""
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        if m == np.inf:
            raise ParticleCollapse(time_index, "infinite log weight")
        raise ParticleCollapse(time_index)
    w = np.exp(logw - m)
    s = w.sum()
    return w / s, float(m + np.log(s) - np.log(logw.size))


def logsumexp(a, axis=None, keepdims: bool = False):
    """log(sum(exp(a))) along ``axis``; -inf for all -inf slices.

    A lean replacement for scipy's version, whose per-call overhead
    dominates the small-array calls in the particle loops.
    """
    a = np.asarray(a, dtype=float)
    if axis is None:
        m = a.max()
        if not np.isfinite(m):
            return float(m) if m == np.inf or a.size == 0 else -np.inf
        return float(m + np.log(np.exp(a - m).sum()))
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if np.ndim(out) else float(out)


def log_mean_exp(logw) -> float:
    return float(logsumexp(logw) - np.log(np.size(logw)))


def ess(norm_weights) -> float:
    """Effective sample size 1 / sum W_i^2."""
    w = np.asarray(norm_weights, dtype=float)
    return float(1.0 / np.dot(w, w))


def _inverse_cdf(norm_weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    # sorted uniforms in [0, 1); side="right" sends u == cdf[k] to k+1, so a
    # zero-weight index is never picked and ties go to the lowest valid index
    cdf = np.cumsum(norm_weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, norm_weights.size - 1)


def resample(norm_weights, n_out: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices drawn so that E[#offspring of i] = n_out * W_i."""
    w = np.asarray(norm_weights, dtype=float)
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    if scheme == "multinomial":
        u = np.sort(rng.random(n_out))
    elif scheme == "systematic":
        u = (np.arange(n_out) + rng.random()) / n_out
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}; expected one of {RESAMPLING_SCHEMES}")
    return _inverse_cdf(w, u)


def sample_categorical(norm_weights, size: int, rng: np.random.Generator) -> np.ndarray:
    """Unsorted i.i.d. categorical draws (order matters for path sampling)."""
    return _inverse_cdf(np.asarray(norm_weights, dtype=float), rng.random(size))


# --- random streams -------------------------------------------------------
#
# Counter-based generator (Philox).  A master seed and a replicate index map
# to a 128-bit Philox key through SeedSequence; time step n of that
# replicate uses the same key with the top counter word set to n, so every
# (replicate, step) substream is reproducible in isolation and disjoint
# from the others for fewer than 2**192 draws per step.


def replicate_key(master_seed: int, replicate: int = 0) -> np.ndarray:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(replicate),))
    return ss.generate_state(2, dtype=np.uint64)


class Streams:
    """Per-step Philox substreams for one replicate."""

    def __init__(self, master_seed: int = 0, replicate: int = 0, key=None):
        self.master_seed = int(master_seed)
        self.replicate = int(replicate)
        self.key = np.asarray(key if key is not None else replicate_key(master_seed, replicate), dtype=np.uint64)

    def step(self, n: int) -> np.random.Generator:
        counter = np.array([0, 0, 0, int(n)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.key, counter=counter))

    def child(self, tag: int) -> "Streams":
        """Independent stream family, e.g. one per MCMC iteration."""
        ss = np.random.SeedSequence(entropy=[int(k) for k in self.key], spawn_key=(int(tag),))
        return Streams(self.master_seed, self.replicate, key=ss.generate_state(2, dtype=np.uint64))

    def generator(self) -> np.random.Generator:
        """A single sequential generator (for non-step-indexed work)."""
        return self.step(2**63)


def as_streams(seed) -> Streams:
    if isinstance(seed, Streams):
        return seed
    if isinstance(seed, (int, np.integer)):
        return Streams(int(seed))
    raise TypeError(f"expected int seed or Streams, got {type(seed).__name__}")
