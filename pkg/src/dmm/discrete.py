"""Denoising Markov models on finite discrete spaces.

Per-dimension birth-death rate matrices with a discretized Gaussian
stationary law, analytic transition matrices by eigendecomposition, the
discrete score-matching loss through the denoising parameterization of
reverse rates, tau-leaping simulation, and brute-force oracles on tiny
spaces.
"""

import numpy as np
from scipy.linalg import expm

from .core import DiscreteGenerator, as_generator


def gaussian_rate_matrix(S, sigma):
    """Birth-death generator on {0..S-1} reversible w.r.t. a discretized
    Gaussian over centered states, normalized to mean exit rate 1.

    sigma is the Gaussian's standard deviation as a fraction of the grid
    half-width (S-1)/2.
    """
    if S < 2:
        raise ValueError("need at least 2 states")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = np.arange(S) - (S - 1) / 2.0
    sigma_z = sigma * (S - 1) / 2.0
    logw = -(z**2) / (2.0 * sigma_z**2)
    pi = np.exp(logw - logw.max())
    pi /= pi.sum()
    rates = np.zeros((S, S))
    # symmetric square-root rates: pi_x B_{x,x+1} = pi_{x+1} B_{x+1,x} exactly
    for x in range(S - 1):
        r = np.exp((logw[x + 1] - logw[x]) / 2.0)
        rates[x, x + 1] = r
        rates[x + 1, x] = 1.0 / r
    exit_rates = rates.sum(axis=1)
    scale = float(pi @ exit_rates)
    rates /= scale
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return DiscreteGenerator(rates)


def stationary_distribution(B):
    """Stationary probability vector of a generator matrix."""
    rates = B.rates if isinstance(B, DiscreteGenerator) else np.asarray(B)
    w, v = np.linalg.eig(rates.T)
    idx = np.argmin(np.abs(w))
    pi = np.real(v[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def transition_from_tau(B, tau):
    """Row-stochastic exp(tau B) via symmetric eigendecomposition for
    reversible B, with a dense matrix-exponential fallback."""
    rates = B.rates if isinstance(B, DiscreteGenerator) else np.asarray(B)
    pi = stationary_distribution(rates)
    P = None
    if np.all(pi > 1e-300):
        sq = np.sqrt(pi)
        sym = sq[:, None] * rates / sq[None, :]
        if np.max(np.abs(sym - sym.T)) < 1e-9 * max(1.0, np.max(np.abs(sym))):
            sym = 0.5 * (sym + sym.T)
            w, U = np.linalg.eigh(sym)
            P = (U * np.exp(tau * w)) @ U.T
            P = P / sq[:, None] * sq[None, :]
    if P is None:
        P = expm(tau * rates)
    neg = np.minimum(P, 0.0)
    if np.min(neg) < -1e-10:
        raise FloatingPointError("transition matrix entry below -1e-10")
    P = np.maximum(P, 0.0)
    deficit = 1.0 - P.sum(axis=1)
    if np.max(np.abs(deficit)) > 1e-10:
        raise FloatingPointError("transition row sum off by more than 1e-10")
    P[np.arange(P.shape[0]), np.arange(P.shape[0])] += deficit
    return P


def ctmc_transition(B, schedule, t):
    """Transition matrix of the time-rescaled chain at forward time t."""
    return transition_from_tau(B, schedule.integrated_beta(t))


class FactorizedCTMC:
    """One shared per-dimension generator applied independently to D dims."""

    def __init__(self, per_dim_rates, D):
        self.B = per_dim_rates if isinstance(per_dim_rates, DiscreteGenerator) \
            else DiscreteGenerator(per_dim_rates)
        self.S = self.B.n_states
        self.D = int(D)
        self._pi = stationary_distribution(self.B)

    @property
    def stationary(self):
        return self._pi

    def transition(self, schedule, t):
        return ctmc_transition(self.B, schedule, t)

    def joint_generator(self):
        """Kronecker-sum generator on the product space (oracle use only)."""
        n = self.S**self.D
        if n > 10_000:
            raise ValueError("joint space too large to materialize")
        G = np.zeros((n, n))
        eye = np.eye(self.S)
        for d in range(self.D):
            term = np.ones((1, 1))
            for k in range(self.D):
                term = np.kron(term, self.B.rates if k == d else eye)
            G += term
        return G

    def sample_stationary(self, n, rng):
        gen = as_generator(rng)
        return gen.choice(self.S, size=(n, self.D), p=self._pi)

    def sample_forward(self, x0, schedule, t, rng):
        """Noise integer states x0 of shape (n, D) to forward time t."""
        gen = as_generator(rng)
        P = self.transition(schedule, t)
        x0 = np.asarray(x0)
        probs = P[x0]  # (n, D, S)
        u = gen.uniform(size=x0.shape)
        return (u[..., None] > np.cumsum(probs, axis=-1)).sum(axis=-1)


def state_index(x, S):
    """Mixed-radix index of integer state vectors (row-major)."""
    x = np.asarray(x)
    idx = np.zeros(x.shape[:-1], dtype=int)
    for d in range(x.shape[-1]):
        idx = idx * S + x[..., d]
    return idx


def all_states(S, D):
    """Enumerate the product space as an (S^D, D) integer array."""
    grids = np.meshgrid(*[np.arange(S)] * D, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


class ReverseRateModel:
    """Reverse rates through a learned per-dimension denoising distribution.

    denoiser(x, cond, t) -> (n, D, S) probabilities over the clean value of
    each dimension given the noised state x (and optional conditioning).
    """

    def __init__(self, forward, schedule, denoiser, rate_floor=1e-12):
        self.forward = forward
        self.schedule = schedule
        self.denoiser = denoiser
        self.rate_floor = rate_floor
        self.diagnostics = {"rate_clamps": 0, "tau_conflicts": 0}

    def rates_from(self, x, cond, t):
        """A[i, d, y]: reverse jump rate of sample i from x to x with dim d
        set to y, at forward time t. Zero on the diagonal y = x_d."""
        if np.ndim(t) != 0:
            raise ValueError("rates_from expects a single scalar time")
        x = np.asarray(x)
        P = self.forward.transition(self.schedule, t)
        p_post = self.denoiser(x, cond, t)  # (n, D, S) over x0 values
        norms = p_post.sum(axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("denoising distributions not normalized")
        denom = P[:, x]  # (S, n, D): P[x0, x_d]
        denom = np.moveaxis(denom, 0, -1)  # (n, D, S over x0)
        if np.any((denom <= 0.0) & (p_post > 0.0)):
            bad = denom[(denom <= 0.0) & (p_post > 0.0)]
            raise ZeroDivisionError(
                f"cannot condition: q_t(x | x0) = 0 for {bad.size} supported x0")
        M = np.einsum("ndk,ky->ndy", p_post / denom, P)
        Bg = self.forward.B.rates.T[x]  # (n, D, S): B[y, x_d]
        A = M * Bg
        n, D = x.shape
        A[np.arange(n)[:, None], np.arange(D)[None, :], x] = 0.0
        return A


def reverse_rates(model, x_t, cond=None, t=None):
    """Per-dimension reverse rate rows at x_t, including diagonals."""
    x_t = np.asarray(x_t)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = x_t[None, :]
    A = model.rates_from(x_t, cond, t)
    return A[0] if squeeze else A


def discrete_ism_loss(model, batch, schedule=None):
    """Score-matching loss sum_d [-A_xx - sum_{y != x} B_xy log A_yx],
    averaged over the batch. Zero rates inside the log are clamped at the
    model's rate_floor and counted in model.diagnostics. The batch shares a
    single time t (stratify over t outside this function)."""
    x = np.asarray(batch["xt"])
    t = batch["t"]
    if np.ndim(t) != 0:
        raise ValueError("discrete_ism_loss expects a single scalar time per batch")
    cond = batch.get("cond")
    n, D = x.shape
    S = model.forward.S
    Brates = model.forward.B.rates

    A_out = model.rates_from(x, cond, t)
    loss = A_out.sum(axis=(1, 2))  # -A_xx per sample

    # log-rate terms need the denoiser at each neighbour state
    for d in range(D):
        for y in range(S):
            sel = x[:, d] != y
            if not np.any(sel):
                continue
            xn = x[sel].copy()
            xn[:, d] = y
            cn = None if cond is None else np.asarray(cond)[sel]
            A_back = model.rates_from(xn, cn, t)  # rates from neighbour
            a = A_back[np.arange(xn.shape[0]), d, x[sel, d]]
            clamped = a < model.rate_floor
            model.diagnostics["rate_clamps"] += int(clamped.sum())
            a = np.maximum(a, model.rate_floor)
            loss[sel] -= Brates[x[sel, d], y] * np.log(a)
    return float(loss.mean())


def tau_leaping_sample(model, cond=None, n_steps=250, rng=None, n_samples=1,
                       t_eps=None):
    """Reverse-time tau-leaping from the per-dimension stationary law.

    Poisson jump counts per (dimension, destination); multiple selected
    destinations within one dimension are applied in ascending destination
    order (a deterministic, reproducible conflict rule)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen = as_generator(rng)
    sched = model.schedule
    T = sched.horizon_T
    eps = 1e-3 * T if t_eps is None else t_eps
    h = (T - eps) / n_steps
    x = model.forward.sample_stationary(n_samples, gen)
    for k in range(n_steps):
        tf = T - k * h
        # the noising process runs at rate beta(t) B, so the reversal does too
        A = model.rates_from(x, cond, tf) * sched.beta_at(tf)
        counts = gen.poisson(A * h)
        hits = counts > 0
        conflict = hits.sum(axis=-1) > 1
        model.diagnostics["tau_conflicts"] += int(conflict.sum())
        for y in range(model.forward.S):
            mask = hits[:, :, y]
            x = np.where(mask, y, x)
    return x[0] if n_samples == 1 else x


def brute_force_marginals(B, schedule, q0, times):
    """Exact marginals q_t = q_0 exp(integrated_beta(t) B) on a small space."""
    if isinstance(B, FactorizedCTMC):
        G = B.joint_generator()
    else:
        G = B.rates if isinstance(B, DiscreteGenerator) else np.asarray(B)
    if G.shape[0] > 10_000:
        raise ValueError("state space too large for brute force")
    q0 = q0.probs if hasattr(q0, "probs") else np.asarray(q0, dtype=np.float64)
    out = []
    for t in np.atleast_1d(times):
        tau = schedule.integrated_beta(t)
        out.append(q0 @ expm(tau * G))
    return out


def exact_posterior_denoiser(forward, schedule, q0_per_dim):
    """Bayes-optimal denoiser for independent per-dimension priors.

    q0_per_dim: (D, S) prior over the clean value of each dimension.
    Returns a denoiser(x, cond, t) -> (n, D, S) closure."""
    q0_per_dim = np.asarray(q0_per_dim, dtype=np.float64)

    def denoiser(x, cond, t):
        x = np.asarray(x)
        P = forward.transition(schedule, t)
        lik = np.moveaxis(P[:, x], 0, -1)  # (n, D, S): P[x0, x_d]
        post = q0_per_dim[None, :, :] * lik
        return post / post.sum(axis=-1, keepdims=True)

    return denoiser
