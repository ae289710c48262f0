"""Sequential Monte Carlo for state-space models."""

from .filter import FilterOptions, FilterOutput, filter_loglik, filter_stream, run_filter
from .kalman import grid_posterior, kalman_filter, kalman_loglik, kalman_smoother
from .model import LinearGaussian, Theta, simulate_lgssm
from .particle_core import ParticleCollapse, ParticleSystem, Streams

__version__ = "0.1.0"

__all__ = [
    "FilterOptions",
    "FilterOutput",
    "LinearGaussian",
    "ParticleCollapse",
    "ParticleSystem",
    "Streams",
    "Theta",
    "filter_loglik",
    "filter_stream",
    "grid_posterior",
    "kalman_filter",
    "kalman_loglik",
    "kalman_smoother",
    "run_filter",
    "simulate_lgssm",
]
