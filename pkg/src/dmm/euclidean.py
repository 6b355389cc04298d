"""Denoising Markov models on R^d.

Time-rescaled Ornstein-Uhlenbeck noising with analytic Gaussian
transitions, the denoising score matching loss, the Euler-Maruyama
reverse sampler, and the g-and-k simulator for likelihood-free
posterior inference.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import autodiff as ad
from .core import as_generator


def default_t_eps(schedule):
    """Truncation near t=0 where the conditional score diverges."""
    return 1e-3 * schedule.horizon_T


@dataclass(frozen=True)
class OUKernelParams:
    """Mean coefficient m(t) and variance v(t) of q_{t|0}."""

    mean_coeff: float
    variance: float


def ou_transition(schedule, t):
    """Analytic OU transition: x_t | x_0 ~ N(m(t) x_0, v(t) I)."""
    gamma = schedule.integrated_beta(t)
    m = np.exp(-0.5 * gamma)
    return OUKernelParams(mean_coeff=m, variance=1.0 - m * m)


def ou_sample(params, x0, rng):
    gen = as_generator(rng)
    x0 = np.asarray(x0, dtype=np.float64)
    return params.mean_coeff * x0 + np.sqrt(params.variance) * gen.standard_normal(x0.shape)


def conditional_score(x_t, x_0, params):
    """Gradient of log q_{t|0}(x_t | x_0): -(x_t - m x_0)/v."""
    if params.variance <= 0.0:
        raise ValueError("conditional score undefined at v(t) = 0")
    return -(np.asarray(x_t) - params.mean_coeff * np.asarray(x_0)) / params.variance


def dsm_loss(net, params, batch, schedule):
    """Denoising score matching loss over a batch.

    batch: dict with x0 (B,d), t (B,), xt (B,d), optional cond (B,c).
    Returns a Tensor when params are Tensors (for training), else a float.
    """
    x0, t, xt = batch["x0"], batch["t"], batch["xt"]
    cond = batch.get("cond")
    targets = np.empty_like(np.asarray(xt, dtype=np.float64))
    for i, ti in enumerate(np.atleast_1d(t)):
        targets[i] = conditional_score(xt[i], x0[i], ou_transition(schedule, ti))
    traced = any(isinstance(v, ad.Tensor) for v in params.values())
    out = net.apply(params, ad.Tensor(xt) if traced else xt, t, cond)
    if traced:
        diff = out - ad.Tensor(targets)
        return (diff * diff).sum() * (0.5 / np.asarray(xt).shape[0])
    diff = out - targets
    return float(0.5 * np.mean(np.sum(diff * diff, axis=-1)))


def reverse_sample(score_fn, schedule, n_steps, rng, n_samples=1, dim=1,
                   t_eps=None, drift_only=False):
    """Euler-Maruyama reverse sampler started from N(0, I).

    score_fn(x, t_forward) -> array like x, the score estimate at forward
    time t_forward. Returns an array of shape (n_samples, dim).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen = as_generator(rng)
    T = schedule.horizon_T
    eps = default_t_eps(schedule) if t_eps is None else t_eps
    h = (T - eps) / n_steps
    x = gen.standard_normal((n_samples, dim))
    for k in range(n_steps):
        tf = T - k * h
        beta = schedule.beta_at(tf)
        drift = 0.5 * beta * x + beta * score_fn(x, tf)
        noise = 0.0 if drift_only else np.sqrt(beta * h) * gen.standard_normal(x.shape)
        x = x + drift * h + noise
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at reverse step {k}")
    return x


def eps_dsm_loss(raw_net, params, batch, schedule):
    """Noise-prediction form of the DSM objective (unit time weighting).

    Regresses the injected standard normal noise eps = (x_t - m x_0)/sqrt(v);
    shares its minimizer with dsm_loss but keeps per-sample gradient scales
    O(1), which the 1/v(t) weighting of the score form does not.
    """
    x0 = np.asarray(batch["x0"], dtype=np.float64)
    xt = np.asarray(batch["xt"], dtype=np.float64)
    t = np.atleast_1d(batch["t"])
    cond = batch.get("cond")
    m = np.exp(-0.5 * schedule.integrated_beta(t))[:, None]
    v = 1.0 - m * m
    eps = (xt - m * x0) / np.sqrt(v)
    traced = any(isinstance(p, ad.Tensor) for p in params.values())
    out = raw_net.apply(params, ad.Tensor(xt) if traced else xt, t, cond)
    diff = out - (ad.Tensor(eps) if traced else eps)
    if traced:
        return (diff * diff).sum() * (0.5 / xt.shape[0])
    return float(0.5 * np.mean(np.sum(diff * diff, axis=-1)))


class NoiseScoreNet:
    """Noise parameterization: the wrapped net predicts the injected noise
    epsilon on its natural unit scale and the score is -raw/sqrt(v(t)).

    Keeps regression targets O(1) across t, which the plain score target
    is not near t_eps.
    """

    def __init__(self, net, schedule):
        self.net = net
        self.schedule = schedule
        self.cond_dim = net.cond_dim

    def init_params(self, rng):
        return self.net.init_params(rng)

    def arch(self):
        return self.net.arch()

    def apply(self, params, x, t, cond=None):
        raw = self.net.apply(params, x, t, cond)
        m = np.exp(-0.5 * self.schedule.integrated_beta(np.atleast_1d(t)))
        v = 1.0 - m * m
        factor = -1.0 / np.sqrt(v)
        if raw.ndim == 2:
            factor = factor[:, None] if factor.size > 1 else float(factor[0])
        else:
            factor = float(factor[0])
        return raw * factor


def net_score_fn(net, params, cond=None):
    """Adapt a trained network to the score_fn interface."""

    def fn(x, t):
        c = cond
        if c is not None and np.asarray(c).ndim == 1:
            c = np.broadcast_to(np.asarray(c)[None, :], (x.shape[0], len(c)))
        return net.apply(params, x, t, c)

    return fn


# g-and-k distribution


@dataclass(frozen=True)
class GandKParams:
    A: float
    B: float
    g: float
    k: float

    def __post_init__(self):
        if self.B <= 0.0:
            raise ValueError("B must be positive")
        if self.k <= -0.5:
            raise ValueError("k must exceed -0.5")


def gandk_quantile(q, theta):
    """Quantile function defining the g-and-k distribution."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise ValueError("q must lie in (0, 1)")
    z = ndtri(q)
    return theta.A + theta.B * (1.0 + 0.8 * np.tanh(theta.g * z / 2.0)) * (1.0 + z * z) ** theta.k * z


def gandk_sample(theta, n, rng):
    """Inverse-transform sampling of n g-and-k draws."""
    gen = as_generator(rng)
    return gandk_quantile(gen.uniform(1e-12, 1.0 - 1e-12, size=n), theta)


def gandk_prior_sample(rng, n=1, lo=0.0, hi=10.0):
    """Uniform box prior over (A, B, g, k)."""
    gen = as_generator(rng)
    draws = gen.uniform(lo, hi, size=(n, 4))
    draws[:, 1] = np.maximum(draws[:, 1], 1e-6)  # B > 0
    return draws


def summarize_observations(xi, n):
    """Evenly spaced order statistics (all of them when n equals the size)."""
    xi = np.asarray(xi, dtype=np.float64)
    N = xi.size
    if n > N:
        raise ValueError("cannot request more order statistics than observations")
    s = np.sort(xi)
    if n == N:
        return s
    ranks = (np.floor((np.arange(n) + 0.5) * N / n)).astype(int)
    return s[ranks]


def rescale_to_unit(x, lo, hi):
    """Affine map [lo, hi] -> [-1, 1] (training coordinates)."""
    return 2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0


def rescale_from_unit(u, lo, hi):
    return lo + (np.asarray(u, dtype=np.float64) + 1.0) * (hi - lo) / 2.0
