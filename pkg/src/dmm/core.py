"""Shared abstractions for denoising Markov models.

Time schedules, finite-space generators and distributions, the score
matching operator, KL divergence, and the reproducible RNG contract used
by every state-space module.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RateSchedule:
    """Linear noise schedule beta(t) = beta_min + (beta_max - beta_min) t / T."""

    beta_min: float
    beta_max: float
    horizon_T: float

    def __post_init__(self):
        if not (0.0 < self.beta_min <= self.beta_max):
            raise ValueError("need 0 < beta_min <= beta_max")
        if not self.horizon_T > 0.0:
            raise ValueError("horizon_T must be positive")

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.horizon_T * (1 + 1e-12)):
            raise ValueError(f"t outside [0, {self.horizon_T}]")
        return t

    def beta_at(self, t):
        t = self._check_t(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon_T

    def integrated_beta(self, t):
        """Closed-form integral of beta over [0, t]."""
        t = self._check_t(t)
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon_T)


def beta_at(schedule, t):
    return schedule.beta_at(t)


def integrated_beta(schedule, t):
    return schedule.integrated_beta(t)


class DiscreteGenerator:
    """CTMC generator matrix: nonnegative off-diagonals, rows sum to zero."""

    def __init__(self, rates):
        rates = np.asarray(rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise ValueError("rates must be a square matrix")
        off = rates - np.diag(np.diag(rates))
        if np.any(off < 0.0):
            raise ValueError("off-diagonal rates must be nonnegative")
        if np.max(np.abs(rates.sum(axis=1))) > 1e-12 * max(1.0, np.max(np.abs(rates))):
            raise ValueError("rows must sum to zero")
        self.rates = rates
        self.n_states = rates.shape[0]

    def __repr__(self):
        return f"DiscreteGenerator(n_states={self.n_states})"


class DiscreteDistribution:
    """Probability vector over a finite space."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < -1e-12):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12 * max(1.0, probs.size):
            raise ValueError("probabilities must sum to 1")
        self.probs = np.clip(probs, 0.0, None)

    def __repr__(self):
        return f"DiscreteDistribution(n={self.probs.size})"


def phi_discrete(B, f, x=None):
    """Score matching operator on a finite space.

    Phi(f)(x) = (B f)(x) / f(x) - (B log f)(x). Nonnegative for any
    generator B and strictly positive f, zero when f is constant.
    Returns the full vector when x is None.
    """
    rates = B.rates if isinstance(B, DiscreteGenerator) else np.asarray(B, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0.0):
        raise ValueError("f must be strictly positive")
    vals = (rates @ f) / f - rates @ np.log(f)
    if x is None:
        return vals
    return vals[x]


def kl_discrete(p, q):
    """KL(p || q) for finite distributions, with 0 log 0 = 0."""
    pv = p.probs if isinstance(p, DiscreteDistribution) else np.asarray(p, dtype=np.float64)
    qv = q.probs if isinstance(q, DiscreteDistribution) else np.asarray(q, dtype=np.float64)
    mask = pv > 0.0
    if np.any(qv[mask] <= 0.0):
        raise ValueError("support of p not contained in support of q")
    return float(np.sum(pv[mask] * (np.log(pv[mask]) - np.log(qv[mask]))))


class RngStream:
    """Reproducible, independent random stream keyed by (seed, stream_id)."""

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.default_rng(ss)

    def child(self, stream_id):
        """A fresh independent stream under the same seed."""
        return RngStream(self.seed, stream_id)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def as_generator(rng):
    """Accept an RngStream, numpy Generator, or integer seed."""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
