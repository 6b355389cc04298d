"""Denoising Markov models on Euclidean space, finite spaces, SO(3), and the simplex."""

from .core import (
    DiscreteDistribution,
    DiscreteGenerator,
    RateSchedule,
    RngStream,
    kl_discrete,
    phi_discrete,
)

__all__ = [
    "DiscreteDistribution",
    "DiscreteGenerator",
    "RateSchedule",
    "RngStream",
    "kl_discrete",
    "phi_discrete",
]

__version__ = "0.1.0"
