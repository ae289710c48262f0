"""State-space model contract and the scalar linear-Gaussian model.

The linear-Gaussian model is

    X_n = rho * X_{n-1} + tau * W_n,    Y_n = X_n + sigma * V_n,

with W_n, V_n independent standard normals and a stationary initial law
X_0 ~ N(0, tau2 / (1 - rho^2)).  All densities are evaluated in log space.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

PARAM_NAMES = ("rho", "tau2", "sigma2")
_LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Raised when a parameter value lies outside the model's domain."""


@dataclass(frozen=True)
class Theta:
    """Parameter triple (rho, tau2, sigma2) with a free/fixed mask.

    Boundary values (|rho| = 1, tau2 = 0, sigma2 = 0) are representable so
    that degenerate M-step outputs can be reported; use :meth:`on_boundary`
    to detect them.  Density evaluation rejects them.
    """

    rho: float
    tau2: float
    sigma2: float
    free_mask: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "tau2", float(self.tau2))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "free_mask", tuple(bool(b) for b in self.free_mask))
        if len(self.free_mask) != 3:
            raise ModelError("free_mask must have three entries")
        if not all(math.isfinite(v) for v in (self.rho, self.tau2, self.sigma2)):
            raise ModelError(f"non-finite parameter in {self}")
        if abs(self.rho) > 1.0:
            raise ModelError(f"|rho| must be <= 1, got {self.rho}")
        if self.tau2 < 0.0 or self.sigma2 < 0.0:
            raise ModelError(f"variances must be >= 0, got tau2={self.tau2}, sigma2={self.sigma2}")

    @classmethod
    def from_std(cls, rho: float, tau: float, sigma: float, **kw: Any) -> "Theta":
        """Build from standard deviations (tau, sigma) instead of variances."""
        return cls(rho, tau * tau, sigma * sigma, **kw)

    @property
    def free_names(self) -> tuple[str, ...]:
        return tuple(n for n, f in zip(PARAM_NAMES, self.free_mask) if f)

    @property
    def free_index(self) -> np.ndarray:
        return np.flatnonzero(self.free_mask)

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.tau2, self.sigma2])

    def replace(self, **changes: Any) -> "Theta":
        return dataclasses.replace(self, **changes)

    def with_values(self, values: np.ndarray) -> "Theta":
        """New Theta taking free components from ``values`` (length 3)."""
        cur = self.as_array()
        mask = np.asarray(self.free_mask)
        new = np.where(mask, np.asarray(values, dtype=float), cur)
        return Theta(new[0], new[1], new[2], self.free_mask)

    def on_boundary(self) -> tuple[str, ...]:
        out = []
        if abs(self.rho) >= 1.0:
            out.append("rho")
        if self.tau2 <= 0.0:
            out.append("tau2")
        if self.sigma2 <= 0.0:
            out.append("sigma2")
        return tuple(out)

    @property
    def stationary_var(self) -> float:
        if abs(self.rho) >= 1.0:
            raise ModelError("stationary variance undefined for |rho| = 1")
        return self.tau2 / (1.0 - self.rho**2)


@dataclass(frozen=True)
class Trajectory:
    """States x_{0:T} and observations y_{0:T}."""

    states: np.ndarray
    observations: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.states, dtype=float)
        y = np.asarray(self.observations, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 1:
            raise ValueError("states and observations must be 1-D of equal length >= 1")
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "observations", y)

    @property
    def horizon(self) -> int:
        return self.states.size - 1

    def __len__(self) -> int:
        return self.states.size


def norm_logpdf(x, mean, var):
    """Gaussian log density, broadcasting over array arguments."""
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


class ModelContract:
    """Densities and samplers needed by the particle algorithms.

    ``theta`` arguments only need ``rho``, ``tau2`` and ``sigma2``
    attributes, which may be arrays broadcasting against the particle axis
    (used when each particle carries its own parameter value).  A ``None``
    previous state ``x`` denotes time 0.
    """

    #: True when the proposal equals the transition and the predictive
    #: weight is identically one (bootstrap filter).
    proposal_is_prior = False
    kind = "custom"

    def init_sample(self, theta, size: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def init_logpdf(self, theta, x0):
        raise NotImplementedError

    def trans_sample(self, theta, x, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def trans_logpdf(self, theta, x_new, x):
        raise NotImplementedError

    def obs_logpdf(self, theta, y, x):
        raise NotImplementedError

    def proposal_sample(self, theta, y, x, rng: np.random.Generator, size: int | None = None):
        raise NotImplementedError

    def proposal_logpdf(self, theta, x_new, y, x):
        raise NotImplementedError

    def predictive_logweight(self, theta, y, x):
        """log q(y | x); zero for SISR/bootstrap."""
        return np.zeros_like(np.asarray(x, dtype=float))

    def trans_log_bound(self, theta) -> float | None:
        """log C with f(x'|x) <= C for all x, x', if such a bound exists."""
        return None

    def log_weight(self, theta, y, x_prev, x_new):
        """Log importance weight (before the predictive factor is divided out)."""
        if x_prev is None:
            if self.proposal_is_prior:
                return self.obs_logpdf(theta, y, x_new)
            return (self.obs_logpdf(theta, y, x_new) + self.init_logpdf(theta, x_new)
                    - self.proposal_logpdf(theta, x_new, y, None))
        if self.proposal_is_prior:
            return self.obs_logpdf(theta, y, x_new)
        return (self.obs_logpdf(theta, y, x_new) + self.trans_logpdf(theta, x_new, x_prev)
                - self.proposal_logpdf(theta, x_new, y, x_prev)
                - self.predictive_logweight(theta, y, x_prev))


@dataclass(frozen=True)
class LinearGaussian(ModelContract):
    """Scalar linear-Gaussian model.

    ``proposal`` selects the importance distribution: ``"bootstrap"`` uses
    the transition density with unit predictive weight, ``"optimal"`` uses
    p(x_n | y_n, x_{n-1}) with predictive weight p(y_n | x_{n-1}).
    ``init_var`` replaces the stationary initial law by N(0, init_var),
    which is what a random walk (rho = 1) needs.
    """

    proposal: str = "bootstrap"
    init_var: float | None = None
    kind: str = field(init=False)

    def __post_init__(self) -> None:
        if self.proposal not in ("bootstrap", "optimal"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if self.init_var is not None and not self.init_var > 0.0:
            raise ValueError("init_var must be > 0")
        object.__setattr__(self, "kind", self.proposal)

    @property
    def proposal_is_prior(self) -> bool:  # type: ignore[override]
        return self.proposal == "bootstrap"

    def _init_var(self, theta):
        if self.init_var is not None:
            return self.init_var
        return theta.tau2 / (1.0 - np.square(theta.rho))

    def init_sample(self, theta, size, rng):
        return np.sqrt(self._init_var(theta)) * rng.standard_normal(size)

    def init_logpdf(self, theta, x0):
        return norm_logpdf(x0, 0.0, self._init_var(theta))

    def trans_sample(self, theta, x, rng):
        x = np.asarray(x, dtype=float)
        return theta.rho * x + np.sqrt(theta.tau2) * rng.standard_normal(x.shape)

    def trans_logpdf(self, theta, x_new, x):
        return norm_logpdf(x_new, theta.rho * x, theta.tau2)

    def obs_logpdf(self, theta, y, x):
        return norm_logpdf(y, x, theta.sigma2)

    def trans_log_bound(self, theta):
        return -0.5 * math.log(2.0 * math.pi * theta.tau2)

    # optimal proposal: Gaussian product of prior mean/var with the observation
    def _optimal_moments(self, theta, y, x):
        if x is None:
            prior_mean, prior_var = 0.0, self._init_var(theta)
        else:
            prior_mean, prior_var = theta.rho * np.asarray(x, dtype=float), theta.tau2
        var = 1.0 / (1.0 / prior_var + 1.0 / theta.sigma2)
        mean = var * (prior_mean / prior_var + y / theta.sigma2)
        return mean, var

    def proposal_sample(self, theta, y, x, rng, size=None):
        if self.proposal == "bootstrap":
            if x is None:
                return self.init_sample(theta, size, rng)
            return self.trans_sample(theta, x, rng)
        mean, var = self._optimal_moments(theta, y, x)
        shape = np.shape(mean) if x is not None else (size,)
        return mean + np.sqrt(var) * rng.standard_normal(shape)

    def proposal_logpdf(self, theta, x_new, y, x):
        if self.proposal == "bootstrap":
            if x is None:
                return self.init_logpdf(theta, x_new)
            return self.trans_logpdf(theta, x_new, x)
        mean, var = self._optimal_moments(theta, y, x)
        return norm_logpdf(x_new, mean, var)

    def predictive_logweight(self, theta, y, x):
        if self.proposal == "bootstrap":
            return np.zeros_like(np.asarray(x, dtype=float))
        return norm_logpdf(y, theta.rho * np.asarray(x, dtype=float), theta.tau2 + theta.sigma2)


def _check_density_theta(theta: Theta, init_var=None) -> None:
    bad = theta.on_boundary()
    if init_var is not None:
        bad = tuple(b for b in bad if b != "rho")
    if bad:
        raise ModelError(f"parameters on the boundary of the model domain: {bad}")


def lg_densities(theta: Theta, init_var: float | None = None) -> LinearGaussian:
    """Bootstrap contract for the linear-Gaussian model at ``theta``."""
    _check_density_theta(theta, init_var)
    return LinearGaussian("bootstrap", init_var)


def lg_optimal_proposal(theta: Theta, init_var: float | None = None) -> LinearGaussian:
    """Contract using the locally optimal proposal p(x_n | y_n, x_{n-1})."""
    _check_density_theta(theta, init_var)
    return LinearGaussian("optimal", init_var)


def simulate_lgssm(theta: Theta, horizon: int, seed, init_var: float | None = None) -> Trajectory:
    """Simulate x_{0:T}, y_{0:T} from the linear-Gaussian model.

    X_0 is drawn from the stationary law unless ``init_var`` is given.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if init_var is None and abs(theta.rho) >= 1.0:
        raise ModelError("simulation needs |rho| < 1 for the stationary initial law")
    if theta.tau2 <= 0.0:
        raise ModelError("tau2 must be > 0")
    rng = np.random.Generator(np.random.Philox(seed)) if not isinstance(seed, np.random.Generator) else seed
    n = horizon + 1
    w = rng.standard_normal(n)
    v = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = math.sqrt(theta.stationary_var if init_var is None else init_var) * w[0]
    tau = math.sqrt(theta.tau2)
    for k in range(1, n):
        x[k] = theta.rho * x[k - 1] + tau * w[k]
    y = x + math.sqrt(theta.sigma2) * v
    return Trajectory(x, y)
