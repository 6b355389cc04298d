"""Denoising Markov models on the probability simplex.

Wright-Fisher diffusions with parent-independent mutation: exact forward
simulation through the ancestral-process mixture representation, the
implicit score-matching loss in the stability parameterization
s^i = p_i d(log beta)/dp_i, the reverse-rate drift, an Euler-Maruyama
reverse sampler on the simplex, Dirichlet mixture targets, and a
stratified ELBO estimator.

Densities on the simplex are taken with respect to Lebesgue measure on
the affine patch (p_1, ..., p_{N-1}); with that convention the Dirichlet
density is the standard one.
"""

from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy.special import gammaln, digamma

from .core import as_generator

P_FLOOR = 1e-6
NORMAL_APPROX_THRESHOLD = 0.05


@dataclass(frozen=True)
class WFParams:
    """Mutation parameters of a Wright-Fisher diffusion.

    Off-diagonal mutation rates are theta_j / 2 (parent-independent), so
    the invariant law is Dirichlet(theta). theta_j > 2 keeps the forward
    path in the interior of the simplex.
    """

    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.ndim != 1 or th.shape[0] < 2:
            raise ValueError("theta must be a vector of length >= 2")
        if np.any(th <= 2.0):
            raise ValueError("all mutation parameters must exceed 2")
        object.__setattr__(self, "theta", th)

    @property
    def N(self):
        return self.theta.shape[0]

    @property
    def total(self):
        return float(self.theta.sum())


@dataclass
class AncestralCoefficients:
    """Distribution of the ancestor count n at elapsed diffusion time t.

    weights[k] is the probability of n = n0 + k.
    """

    t: float
    n0: int
    weights: np.ndarray

    def sample(self, n_draws, rng):
        gen = as_generator(rng)
        return self.n0 + gen.choice(self.weights.shape[0], size=n_draws,
                                    p=self.weights)

    def mean(self):
        return self.n0 + float(np.arange(self.weights.shape[0]) @ self.weights)


def _dn_series(theta_total, n, tau, dps):
    """One coefficient d_n(tau) by the alternating falling-factorial series."""
    with mpmath.workdps(dps):
        th = mpmath.mpf(theta_total)
        t = mpmath.mpf(tau)
        # leading term k = n
        a = mpmath.exp(-n * (n + th - 1) * t / 2) * (2 * n + th - 1) \
            * mpmath.gamma(2 * n + th - 1) / (mpmath.factorial(n) * mpmath.gamma(n + th))
        total = mpmath.mpf(0)
        k = n
        while True:
            total += a
            ratio = ((th + 2 * k + 1) / (th + 2 * k - 1)) \
                * (th + n + k - 1) / (k + 1 - n) \
                * mpmath.exp(-(2 * k + th) * t / 2)
            a = -a * ratio
            k += 1
            mag = abs(a)
            if mag < mpmath.mpf(10) ** (-30) * max(abs(total), mpmath.mpf(1)):
                break
            if k - n > 100_000:
                raise FloatingPointError("ancestral coefficient series did not converge")
        return float(total)


def _normal_approx_coefficients(theta_total, tau):
    """Gaussian approximation to the ancestor count for small times,
    discretized to integers by interval probabilities."""
    from scipy.stats import norm

    b = (theta_total - 1.0) * tau / 2.0
    eta = b / np.expm1(b) if abs(b) > 1e-12 else 1.0 - b / 2.0
    mu = 2.0 * eta / tau
    var = (2.0 * eta / tau) * ((eta + b) ** 2) \
        * (1.0 + eta / (eta + b) - 2.0 * eta) / b**2
    sigma = np.sqrt(max(var, 1e-300))
    lo = max(0, int(np.floor(mu - 10 * sigma)))
    hi = int(np.ceil(mu + 10 * sigma))
    edges = np.arange(lo, hi + 2) - 0.5
    cdf = norm.cdf(edges, loc=mu, scale=sigma)
    w = np.diff(cdf)
    w = np.maximum(w, 0.0)
    w /= w.sum()
    return lo, w


_coef_cache = {}


def ancestral_coefficients(params, t, tail_tol=1e-8):
    """Law of the ancestral death process count at elapsed diffusion time t.

    Uses the alternating series for moderate and large times and a normal
    approximation below a small-time threshold.
    """
    if t <= 0:
        raise ValueError("time must be positive")
    key = (round(float(t), 9), params.total, tail_tol)
    if key in _coef_cache:
        return _coef_cache[key]
    th = params.total
    if t < NORMAL_APPROX_THRESHOLD:
        n0, w = _normal_approx_coefficients(th, t)
        out = AncestralCoefficients(t=float(t), n0=n0, weights=w)
        _coef_cache[key] = out
        return out
    dps = 50 + int(6.0 / t)
    weights = []
    cum = 0.0
    n = 0
    while cum < 1.0 - tail_tol:
        d = _dn_series(th, n, t, dps)
        if d < -1e-10:
            raise FloatingPointError(f"negative ancestral coefficient d_{n} = {d}")
        d = max(d, 0.0)
        weights.append(d)
        cum += d
        n += 1
        if n > 100_000:
            raise FloatingPointError("ancestral coefficients did not accumulate to 1")
    w = np.array(weights)
    if abs(w.sum() - 1.0) > max(tail_tol, 1e-8):
        raise FloatingPointError("truncated ancestral coefficients sum "
                                 f"to {w.sum():.12f}")
    w = w / w.sum()
    out = AncestralCoefficients(t=float(t), n0=0, weights=w)
    _coef_cache[key] = out
    return out


def wf_exact_sample(p0, params, schedule, t, rng, n=None):
    """Exact draw of the noised state at forward time t.

    Mixture representation: n ~ ancestral law at tau = integrated_beta(t),
    alpha ~ Multinomial(n, p0), p_t ~ Dirichlet(alpha + theta).
    p0 may be a single point (N,) or a batch (n, N).
    """
    gen = as_generator(rng)
    p0 = np.asarray(p0, dtype=np.float64)
    squeeze = p0.ndim == 1
    if squeeze:
        p0 = np.broadcast_to(p0, (n or 1, params.N))
    m = p0.shape[0]
    tau = schedule.integrated_beta(t)
    coefs = ancestral_coefficients(params, tau)
    counts = coefs.sample(m, gen)
    alpha = gen.multinomial(counts, p0)
    g = gen.gamma(alpha + params.theta)
    p = g / g.sum(axis=-1, keepdims=True)
    return p[0] if (squeeze and n is None) else p


def wf_forward_em(p0, params, schedule, t, n_steps, rng, n=None):
    """Euler-Maruyama forward discretization (oracle for the exact sampler)."""
    gen = as_generator(rng)
    p0 = np.asarray(p0, dtype=np.float64)
    squeeze = p0.ndim == 1
    if squeeze:
        p0 = np.broadcast_to(p0, (n or 1, params.N)).copy()
    p = p0.copy()
    h = t / n_steps
    for k in range(n_steps):
        tk = k * h
        beta = schedule.beta_at(tk)
        drift = 0.5 * (params.theta[None, :] - params.total * p)
        p = p + beta * h * drift + np.sqrt(beta * h) * _simplex_noise(p, gen)
        p = np.maximum(p, P_FLOOR)
        p /= p.sum(axis=-1, keepdims=True)
    return p[0] if (squeeze and n is None) else p


def _simplex_noise(p, gen):
    """Gaussian with the Wright-Fisher covariance p_i (delta_ij - p_j)."""
    w = gen.standard_normal(p.shape)
    sq = np.sqrt(p)
    return sq * (w - sq * np.sum(sq * w, axis=-1, keepdims=True))


def wf_ism_integrand(score_net, net_params, p, t, diagnostics=None):
    """Per-sample implicit score-matching integrand at interior points.

    sum_ij (delta_ij - p_j) ds^i/dp_j
      + 1/2 sum_ij (delta_ij / p_j - 1) s^i s^j + (1 - N) sum_j s^j

    The divergence term contracts the input Jacobian of the net with
    simplex tangent directions (rows of delta_ij - p_j sum to zero), so it
    is insensitive to how the net extends off the simplex.

    Returns (values, keep_mask); values has one entry per kept sample and
    is a Tensor when net_params are traced.
    """
    from . import autodiff as ad

    p = np.asarray(p, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), p.shape[:1])
    keep = np.min(p, axis=-1) >= P_FLOOR
    if diagnostics is not None:
        diagnostics["boundary_rejects"] = diagnostics.get("boundary_rejects", 0) \
            + int((~keep).sum())
    if not np.any(keep):
        raise ValueError("all samples rejected at the simplex boundary")
    p = p[keep]
    N = p.shape[1]
    # whether the caller wants a differentiable loss (training) or a value
    traced = isinstance(net_params, dict) and any(
        isinstance(v, ad.Tensor) for v in net_params.values())
    P = ad.Tensor(p)
    s = ad.astensor(score_net.apply(net_params, P, t[keep]))
    div = None
    for i in range(N):
        gi = ad.grad(s[:, i].sum(), [P])[0]  # (n, N) rows d s^i / dp_j
        term = gi[:, i] - (gi * ad.Tensor(p)).sum(axis=1)
        div = term if div is None else div + term
    quad = 0.5 * ((s * s / ad.Tensor(p)).sum(axis=1) - s.sum(axis=1) ** 2)
    lin = (1.0 - N) * s.sum(axis=1)
    vals = div + quad + lin
    return (vals if traced else vals.data), keep


def wf_ism_loss(score_net, params, batch, schedule, diagnostics=None):
    """Batch mean of the score-matching integrand, weighted by beta(t).

    batch: dict with pt (n, N) and t (n,). Samples with any coordinate
    below the interior floor are rejected and counted in diagnostics.
    """
    from . import autodiff as ad

    p = np.asarray(batch["pt"], dtype=np.float64)
    t = np.broadcast_to(np.asarray(batch["t"], dtype=np.float64), p.shape[:1])
    vals, keep = wf_ism_integrand(score_net, params, p, t, diagnostics)
    beta = schedule.beta_at(t[keep])
    if isinstance(vals, ad.Tensor):
        return (vals * ad.Tensor(beta)).sum() * (1.0 / beta.shape[0])
    return float(np.mean(vals * beta))


class StationaryScoreNet:
    """Offsets a raw network by theta - 1, the exact score at stationarity.

    With the raw net at zero the reverse drift reduces to the forward
    mutation-drift balance, so training only has to learn the deviation.
    """

    def __init__(self, net, wf_params):
        self.net = net
        self.offset = wf_params.theta - 1.0
        self.cond_dim = net.cond_dim

    def init_params(self, rng):
        return self.net.init_params(rng)

    def arch(self):
        return self.net.arch()

    def apply(self, params, p, t, cond=None):
        return self.net.apply(params, p, t, cond) + self.offset


def reverse_drift(params, p, s):
    """Drift of the reverse Wright-Fisher process at state p given scores s.

    Derived from the reverse rates
    r_ij = theta_j/2 + (p_j/p_i)(theta_i - 1 - s^i) for i != j,
    r_ii = -sum_{j != i} r_ij, as drift_j = sum_i r_ij p_i.
    """
    c = params.theta[None, :] - 1.0 - s
    C = c.sum(axis=-1, keepdims=True)
    return 0.5 * params.theta[None, :] - 0.5 * params.total * p + p * C - c


def wf_reverse_sample(score_fn, params, schedule, n_steps, rng, n_samples=1,
                      t_eps=None, p_floor=P_FLOOR):
    """Euler-Maruyama reverse sampler started from Dirichlet(theta).

    score_fn(p, t_forward) -> (n, N) values of s at forward time t_forward.
    After every step coordinates are clamped to [p_floor, 1] and the point
    renormalized back onto the simplex.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen = as_generator(rng)
    T = schedule.horizon_T
    eps = 1e-3 * T if t_eps is None else t_eps
    h = (T - eps) / n_steps
    p = gen.dirichlet(params.theta, size=n_samples)
    p = np.maximum(p, p_floor)
    p /= p.sum(axis=-1, keepdims=True)
    for k in range(n_steps):
        tf = T - k * h
        beta = schedule.beta_at(tf)
        s = np.asarray(score_fn(p, tf))
        b = reverse_drift(params, p, s)
        step = beta * h * b + np.sqrt(beta * h) * _simplex_noise(p, gen)
        if not np.all(np.isfinite(step)):
            raise FloatingPointError(f"non-finite reverse drift at step {k}")
        p = p + step
        p = np.clip(p, p_floor, 1.0)
        p /= p.sum(axis=-1, keepdims=True)
    return p[0] if n_samples == 1 else p


def net_score_fn(score_net, params):
    def fn(p, t):
        return score_net.apply(params, p, t)

    return fn


def dirichlet_log_pdf(alpha, p):
    """Log Dirichlet density w.r.t. Lebesgue measure on the affine patch.

    Boundary points with any alpha_i < 1 give -inf.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    norm = gammaln(alpha.sum()) - gammaln(alpha).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (alpha - 1.0) * np.log(p)
        terms = np.where((p == 0.0) & (alpha == 1.0), 0.0, terms)
    return norm + terms.sum(axis=-1)


def dirichlet_mixture_sample(alphas, rng, n=1, m=None):
    """Uniform mixture of Dirichlet laws; returns (points, components)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 2 or alphas.shape[0] == 0:
        raise ValueError("alphas must be a nonempty list of parameter vectors")
    if np.any(alphas <= 0):
        raise ValueError("Dirichlet parameters must be positive")
    gen = as_generator(rng)
    comps = np.full(n, m) if m is not None else gen.integers(0, alphas.shape[0], size=n)
    out = np.empty((n, alphas.shape[1]))
    for c in np.unique(comps):
        sel = comps == c
        out[sel] = gen.dirichlet(alphas[c], size=int(sel.sum()))
    return out, comps


def dirichlet_mixture_log_pdf(alphas, p):
    """Exact mixture log-density with log-sum-exp stabilization."""
    alphas = np.asarray(alphas, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    logs = np.stack([dirichlet_log_pdf(a, p) for a in alphas], axis=-1)
    M = alphas.shape[0]
    mx = np.max(logs, axis=-1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    out = safe + np.log(np.sum(np.exp(logs - safe[..., None]), axis=-1)) - np.log(M)
    return np.where(np.isfinite(mx), out, -np.inf)


def elbo_constant(params):
    """beta-independent part of the score-matching integrand,
    (N - 1)(|theta| - N)/2, needed for likelihood bounds."""
    return (params.N - 1) * (params.total - params.N) / 2.0


def elbo_estimate(score_net, net_params, params, schedule, data, rng,
                  n_strata=16, diagnostics=None):
    """Stratified Monte Carlo evidence lower bound for a data batch.

    ELBO = E[log Dirichlet(theta) at p_T]
         - int_0^T beta(t) E[integrand(p_t, t) + const] dt,

    with the time integral stratified into n_strata intervals (the
    integrand varies sharply near t = 0). Returns (mean, stderr) in nats
    per sample.
    """
    gen = as_generator(rng)
    data = np.asarray(data, dtype=np.float64)
    m = data.shape[0]
    T = schedule.horizon_T
    t_lo = 1e-3 * T
    pT = wf_exact_sample(data, params, schedule, T, gen)
    per_sample = dirichlet_log_pdf(params.theta, pT)
    const = elbo_constant(params)
    width = (T - t_lo) / n_strata
    for k in range(n_strata):
        # one shared draw per stratum keeps the coefficient table scalar-t
        t = t_lo + (k + gen.uniform()) * width
        pt = wf_exact_sample(data, params, schedule, t, gen)
        vals, keep = wf_ism_integrand(score_net, net_params, pt,
                                      np.full(m, t), diagnostics)
        beta = schedule.beta_at(t)
        contrib = np.zeros(m)
        contrib[keep] = beta * (np.asarray(vals) + const)
        per_sample = per_sample - width * contrib
    mean = float(per_sample.mean())
    stderr = float(per_sample.std(ddof=1) / np.sqrt(m))
    return mean, stderr
