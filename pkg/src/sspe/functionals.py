"""Additive functionals sum_k s_k(x_{k-1}, x_k) and the built-in statistics.

A functional is evaluated on broadcastable arrays: ``term(k, x_prev, x, y,
theta)`` returns ``broadcast(x_prev, x).shape + (dim,)``.  This lets the
O(N^2) smoothers evaluate every (ancestor, particle) pair in one call.

Quadratic functionals are described by coefficients on the monomials
(x_{k-1}^2, x_{k-1} x_k, x_k^2, x_{k-1}, x_k, 1) and, for the k = 0 term,
(x_0^2, x_0, 1).  The same description drives both particle evaluation and
the exact Kalman expectation.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class AdditiveFunctional:
    """Vector statistic with an optional k = 0 term s_0(x_0)."""

    def __init__(self, dim: int, term: Callable, initial: Callable | None = None, name: str = "custom"):
        self.dim = int(dim)
        self._term = term
        self._initial = initial
        self.name = name

    @property
    def includes_initial_term(self) -> bool:
        return self._initial is not None

    def term(self, k, x_prev, x, y, theta) -> np.ndarray:
        return np.asarray(self._term(k, x_prev, x, y, theta), dtype=float)

    def initial(self, x0, y0, theta) -> np.ndarray:
        if self._initial is None:
            return np.zeros(np.shape(x0) + (self.dim,))
        return np.asarray(self._initial(x0, y0, theta), dtype=float)


class QuadraticFunctional(AdditiveFunctional):
    """Functional whose terms are quadratic polynomials in the states."""

    def __init__(self, dim: int, coeffs: Callable, initial_coeffs: Callable | None = None,
                 name: str = "quadratic", labels: tuple[str, ...] | None = None):
        self.dim = int(dim)
        self.coeffs = coeffs
        self.initial_coeffs = initial_coeffs
        self._initial = initial_coeffs
        self.name = name
        self.labels = labels or tuple(f"s{i}" for i in range(self.dim))

    def term(self, k, x_prev, x, y, theta):
        c = np.asarray(self.coeffs(k, y, theta), dtype=float)  # (dim, 6)
        xp = np.asarray(x_prev, dtype=float)
        xn = np.asarray(x, dtype=float)
        xp, xn = np.broadcast_arrays(xp, xn)
        mono = np.stack([xp * xp, xp * xn, xn * xn, xp, xn, np.ones_like(xn)], axis=-1)
        return mono @ c.T

    def initial(self, x0, y0, theta):
        x0 = np.asarray(x0, dtype=float)
        if self.initial_coeffs is None:
            return np.zeros(x0.shape + (self.dim,))
        c = np.asarray(self.initial_coeffs(y0, theta), dtype=float)  # (dim, 3)
        mono = np.stack([x0 * x0, x0, np.ones_like(x0)], axis=-1)
        return mono @ c.T


def zero_functional(dim: int = 1) -> QuadraticFunctional:
    return QuadraticFunctional(dim, lambda k, y, th: np.zeros((dim, 6)), name="zero")


def cross_product() -> QuadraticFunctional:
    """s_k = x_{k-1} x_k."""
    c = np.array([[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]])
    return QuadraticFunctional(1, lambda k, y, th: c, name="cross_product", labels=("x_prev_x",))


def square_state() -> QuadraticFunctional:
    """s_k = x_k^2 (with s_0 = x_0^2)."""
    c = np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]])
    c0 = np.array([[1.0, 0.0, 0.0]])
    return QuadraticFunctional(1, lambda k, y, th: c, lambda y, th: c0, name="square_state",
                               labels=("x_sq",))


EM_LABELS = ("obs_resid_sq", "x_prev_sq", "x_prev_x", "x_sq", "x0_sq")


def em_statistic(initial: bool = True) -> QuadraticFunctional:
    """EM statistic ((y_k - x_k)^2, x_{k-1}^2, x_{k-1} x_k, x_k^2).

    With ``initial=True`` the k = 0 residual (y_0 - x_0)^2 is folded into the
    first component and a fifth component carries x_0^2, which the exact
    M-step under the stationary initial law needs.
    """

    def coeffs(k, y, th):
        c = np.zeros((5 if initial else 4, 6))
        c[0] = (0.0, 0.0, 1.0, 0.0, -2.0 * y, y * y)
        c[1, 0] = 1.0
        c[2, 1] = 1.0
        c[3, 2] = 1.0
        return c

    if not initial:
        return QuadraticFunctional(4, coeffs, None, name="em", labels=EM_LABELS[:4])

    def init_coeffs(y, th):
        c = np.zeros((5, 3))
        c[0] = (1.0, -2.0 * y, y * y)
        c[4, 0] = 1.0
        return c

    return QuadraticFunctional(5, coeffs, init_coeffs, name="em", labels=EM_LABELS)


SCORE_LABELS = ("d_rho", "d_tau2", "d_sigma2")


def score_statistic(components: tuple[str, ...] = ("rho", "tau2", "sigma2"),
                    initial: bool = True) -> QuadraticFunctional:
    """Complete-data score terms grad log f + grad log g (and grad log mu at k = 0).

    Terms are evaluated at the ``theta`` passed to ``term``, so a
    time-varying parameter sequence can be used.
    """
    order = ("rho", "tau2", "sigma2")
    rows = [order.index(c) for c in components]

    def coeffs(k, y, th):
        r, t2, s2 = th.rho, th.tau2, th.sigma2
        c = np.array([
            [-r / t2, 1.0 / t2, 0.0, 0.0, 0.0, 0.0],
            [r * r / (2 * t2 * t2), -r / (t2 * t2), 1.0 / (2 * t2 * t2), 0.0, 0.0, -1.0 / (2 * t2)],
            [0.0, 0.0, 1.0 / (2 * s2 * s2), 0.0, -y / (s2 * s2), y * y / (2 * s2 * s2) - 1.0 / (2 * s2)],
        ])
        return c[rows]

    def init_coeffs(y, th):
        r, t2, s2 = th.rho, th.tau2, th.sigma2
        c = np.array([
            [r / t2, 0.0, -r / (1.0 - r * r)],
            [(1.0 - r * r) / (2 * t2 * t2), 0.0, -1.0 / (2 * t2)],
            [1.0 / (2 * s2 * s2), -y / (s2 * s2), y * y / (2 * s2 * s2) - 1.0 / (2 * s2)],
        ])
        return c[rows]

    labels = tuple(SCORE_LABELS[i] for i in rows)
    return QuadraticFunctional(len(rows), coeffs, init_coeffs if initial else None,
                               name="score", labels=labels)
