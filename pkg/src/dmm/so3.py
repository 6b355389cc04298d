"""Denoising Markov models on the rotation group SO(3).

Quaternion rotation algebra, the Brownian-motion heat kernel (series and
small-time closed form), inverse-transform angle sampling, scores with a
Varadhan small-time fallback, the geodesic random walk reverse sampler,
and wrapped-normal mixture targets.

Rotations are unit quaternions (w, x, y, z), canonicalized to w >= 0.
The matrix convention follows Rodrigues' formula with the skew matrix
V(a) = [[0, az, -ay], [-az, 0, ax], [ay, -ax, 0]], so quaternion
composition p * q corresponds to matrix(q) @ matrix(p). Tangent vectors
are body-frame coefficients: exp_at(q, v) = q * exp_quat(v), and |v| is
the geodesic distance moved.
"""

import numpy as np

from .core import as_generator

SMALL_TIME_THRESHOLD = 1.0
SERIES_TAIL_TOL = 1e-8


# quaternion algebra (vectorized over leading axes)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Fix the sign ambiguity: scalar part nonnegative."""
    q = np.asarray(q, dtype=np.float64)
    flip = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * flip


def quat_mul(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    w1, x1, y1, z1 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    w2, x2, y2, z2 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 + y1 * w2 + z1 * x2 - x1 * z2,
        w1 * z2 + z1 * w2 + x1 * y2 - y1 * x2,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def exp_quat(v):
    """Tangent 3-vector to quaternion: angle |v| about axis v/|v|."""
    v = np.asarray(v, dtype=np.float64)
    alpha = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * alpha
    small = alpha[..., 0] < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small[..., None], 0.5, np.sin(half) / np.where(alpha == 0, 1.0, alpha))
    return np.concatenate([np.cos(half), s * v], axis=-1)


def log_quat(q):
    """Quaternion to tangent 3-vector (inverse of exp_quat, |v| <= pi)."""
    q = quat_canonical(quat_normalize(q))
    vec = q[..., 1:]
    nv = np.linalg.norm(vec, axis=-1, keepdims=True)
    alpha = 2.0 * np.arctan2(nv[..., 0], q[..., 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(nv[..., 0] < 1e-15, 2.0, alpha / np.where(nv[..., 0] == 0, 1.0, nv[..., 0]))
    return scale[..., None] * vec


def exp_at(q, v):
    """Move from rotation q along body-frame tangent v."""
    return quat_canonical(quat_normalize(quat_mul(q, exp_quat(v))))


def log_map(q_from, q_to):
    """Body-frame tangent at q_from pointing to q_to; |result| = distance."""
    return log_quat(quat_mul(quat_conj(q_from), q_to))


def geodesic_distance(p, q):
    p, q = quat_normalize(p), quat_normalize(q)
    dot = np.abs(np.sum(p * q, axis=-1))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


def rotation_from_axis_angle(axis, alpha):
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
        raise ValueError("axis must be a unit vector")
    return quat_canonical(np.concatenate([
        np.atleast_1d(np.cos(alpha / 2.0)),
        np.sin(alpha / 2.0) * axis,
    ]))


def axis_angle_from_rotation(q):
    v = log_quat(q)
    alpha = float(np.linalg.norm(v))
    if alpha < 1e-15:
        return np.array([0.0, 0.0, 1.0]), 0.0
    return v / alpha, alpha


def skew(v):
    """The convention-defining skew matrix V(v)."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([zero, z, -y], axis=-1),
        np.stack([-z, zero, x], axis=-1),
        np.stack([y, -x, zero], axis=-1),
    ], axis=-2)


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    # transpose of the common convention, matching Rodrigues with V above
    r = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=-1),
        np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=-1),
        np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)
    return r


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    Rs = np.swapaxes(R, -1, -2)  # back to the common convention
    w = 0.5 * np.sqrt(np.maximum(1.0 + Rs[..., 0, 0] + Rs[..., 1, 1] + Rs[..., 2, 2], 0.0))
    # stable Shepperd-style extraction
    # entries below equal 4w(x, y, z), so (4w^2, .) is proportional to q
    x = Rs[..., 2, 1] - Rs[..., 1, 2]
    y = Rs[..., 0, 2] - Rs[..., 2, 0]
    z = Rs[..., 1, 0] - Rs[..., 0, 1]
    q = np.stack([4.0 * w * w, x, y, z], axis=-1)
    small = w < 1e-6
    if np.any(small):
        q = np.where(small[..., None], _quat_from_matrix_small_w(Rs), q)
    return quat_canonical(quat_normalize(q))


def _quat_from_matrix_small_w(Rs):
    d = np.stack([Rs[..., 0, 0], Rs[..., 1, 1], Rs[..., 2, 2]], axis=-1)
    i = np.argmax(d, axis=-1)
    out = np.zeros(Rs.shape[:-2] + (4,))
    for axis in range(3):
        j, k = (axis + 1) % 3, (axis + 2) % 3
        s = np.sqrt(np.maximum(1.0 + Rs[..., axis, axis] - Rs[..., j, j] - Rs[..., k, k], 1e-300))
        q = np.zeros_like(out)
        q[..., 0] = (Rs[..., k, j] - Rs[..., j, k]) / (2 * s)
        q[..., 1 + axis] = 0.5 * s
        q[..., 1 + j] = (Rs[..., j, axis] + Rs[..., axis, j]) / (2 * s)
        q[..., 1 + k] = (Rs[..., k, axis] + Rs[..., axis, k]) / (2 * s)
        out = np.where((i == axis)[..., None], q, out)
    return out


def rodrigues_matrix(axis, alpha):
    """R = I + sin(a) V + (1 - cos(a)) V^2 in this module's convention."""
    V = skew(np.asarray(axis, dtype=np.float64))
    return np.eye(3) + np.sin(alpha) * V + (1.0 - np.cos(alpha)) * (V @ V)


def uniform_rotation(n, rng):
    gen = as_generator(rng)
    return quat_canonical(quat_normalize(gen.standard_normal((n, 4))))


def matrix_features(q):
    """Flattened rotation matrices as network inputs, shape (n, 9)."""
    q = np.asarray(q)
    return quat_to_matrix(q).reshape(q.shape[:-1] + (9,))


# heat kernel


def series_ell_max(t, tol=SERIES_TAIL_TOL, cap=400):
    """Smallest cutoff whose tail bound (2l+3) exp(-l(l+1)t/2) <= tol."""
    ell = 1
    while (2 * ell + 3) * np.exp(-ell * (ell + 1) * t / 2.0) > tol and ell < cap:
        ell += 1
    return ell


class IGSO3Kernel:
    """Heat-kernel density on SO(3) at diffusion time t.

    angle_density gives the marginal density of the rotation angle on
    [0, pi]; relative_log_density and its derivative refer to the density
    with respect to the uniform (Haar) measure, as a function of angle.
    """

    def __init__(self, t, small_time_threshold=SMALL_TIME_THRESHOLD, cdf_grid=4096):
        if t <= 0:
            raise ValueError("diffusion time must be positive")
        self.t = float(t)
        self.small_time_threshold = small_time_threshold
        self.ell_max = series_ell_max(max(t, small_time_threshold))
        self._cdf_grid = cdf_grid
        self._cdf = None

    # series pieces

    def _series(self, alpha, deriv=False):
        """sum (2l+1) e^{-l(l+1)t/2} sin((l+1/2)a)/sin(a/2), or its
        derivative in a; the l-term sine ratio tends to (2l+1) at a=0."""
        alpha = np.asarray(alpha, dtype=np.float64)
        ells = np.arange(self.ell_max + 1)
        c = (2 * ells + 1) * np.exp(-ells * (ells + 1) * self.t / 2.0)
        a = alpha[..., None]
        half = np.where(np.abs(a) < 1e-8, 1e-8, a / 2.0)
        lp = ells + 0.5
        s_half = np.sin(half)
        ratio = np.sin(lp * 2 * half) / s_half
        if not deriv:
            vals = np.where(np.abs(a) < 1e-8, 2 * ells + 1.0, ratio)
            return np.sum(c * vals, axis=-1)
        dratio = (lp * np.cos(lp * 2 * half) * s_half
                  - 0.5 * np.cos(half) * np.sin(lp * 2 * half)) / s_half**2
        dvals = np.where(np.abs(a) < 1e-8, 0.0, dratio)
        return np.sum(c * dvals, axis=-1)

    def series_density(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        return (1.0 - np.cos(alpha)) / np.pi * self._series(alpha)

    def small_time_density(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        t = self.t
        half = np.where(alpha < 1e-10, 1e-10, alpha / 2.0)
        pref = (1.0 - np.cos(alpha)) / (2.0 * np.sqrt(np.pi) * np.sin(half))
        pref = pref * (t / 2.0) ** -1.5 * np.exp(t / 8.0)
        total = (alpha * np.exp(-(alpha**2) / (2 * t))
                 - (alpha - 2 * np.pi) * np.exp(-((alpha - 2 * np.pi) ** 2) / (2 * t))
                 - (alpha + 2 * np.pi) * np.exp(-((alpha + 2 * np.pi) ** 2) / (2 * t)))
        return pref * total

    def angle_density(self, alpha):
        if self.t < self.small_time_threshold:
            return self.small_time_density(alpha)
        return self.series_density(alpha)

    def relative_log_density(self, alpha):
        """log density w.r.t. the uniform measure, as a function of angle."""
        if self.t < self.small_time_threshold:
            # divide out the angle-marginal factor (1-cos a)/pi
            alpha = np.asarray(alpha, dtype=np.float64)
            base = self.small_time_density(alpha)
            marg = (1.0 - np.cos(alpha)) / np.pi
            return np.log(np.maximum(base, 1e-300)) - np.log(np.maximum(marg, 1e-300))
        return np.log(np.maximum(self._series(alpha), 1e-300))

    def dlog_relative_density(self, alpha):
        """d/d alpha of relative_log_density (series regime)."""
        s = self._series(alpha)
        ds = self._series(alpha, deriv=True)
        return ds / np.maximum(s, 1e-300)

    # sampling

    def _build_cdf(self):
        grid = np.linspace(0.0, np.pi, self._cdf_grid)
        dens = self.angle_density(grid)
        dens = np.maximum(dens, 0.0)
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2.0 * np.diff(grid))])
        cdf /= cdf[-1]
        self._cdf = (grid, cdf)

    def sample_angles(self, n, rng):
        gen = as_generator(rng)
        if self._cdf is None:
            self._build_cdf()
        grid, cdf = self._cdf
        u = gen.uniform(size=n)
        return np.interp(u, cdf, grid)


_kernel_cache = {}


def kernel_for(tau):
    """Shared kernel instances keyed by rounded diffusion time."""
    key = round(float(tau), 9)
    if key not in _kernel_cache:
        _kernel_cache[key] = IGSO3Kernel(key)
    return _kernel_cache[key]


def sample_igso3(kernel, center, rng, n=None):
    """Heat-kernel draws around a center rotation.

    center: quaternion (4,) or (n, 4); returns matching shape.
    """
    gen = as_generator(rng)
    center = np.asarray(center, dtype=np.float64)
    squeeze = center.ndim == 1
    if squeeze:
        center = np.broadcast_to(center, (n or 1, 4))
    m = center.shape[0]
    axes = gen.standard_normal((m, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = kernel.sample_angles(m, gen)
    out = exp_at(center, axes * angles[:, None])
    return out[0] if (squeeze and n is None) else out


def heat_kernel_score(x_t, x_0, t):
    """Gradient of log q_{t|0}(x_t | x_0) as body-frame coefficients at x_t.

    t may be a scalar or per-sample array; times below the small-time
    threshold use Varadhan's approximation exp^{-1}_{x_t}(x_0)/t.
    """
    single = np.asarray(x_t).ndim == 1
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x_0 = np.atleast_2d(np.asarray(x_0, dtype=np.float64))
    x_0 = np.broadcast_to(x_0, x_t.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x_t.shape[:1]).copy()
    v = log_map(x_t, x_0)
    alpha = np.linalg.norm(v, axis=-1)
    out = np.zeros_like(v)
    small = t < SMALL_TIME_THRESHOLD
    if np.any(small):
        out[small] = v[small] / t[small, None]
    big = ~small
    if np.any(big):
        a = np.clip(alpha[big], 1e-12, np.pi - 1e-9)
        slopes = np.empty_like(a)
        for tv in np.unique(t[big]):
            sel = t[big] == tv
            slopes[sel] = kernel_for(tv).dlog_relative_density(a[sel])
        unit = np.where(alpha[big, None] > 1e-12, v[big] / np.maximum(alpha[big, None], 1e-12), 0.0)
        out[big] = -slopes[:, None] * unit
    return out[0] if single else out


def so3_dsm_loss(score_net, params, batch, schedule):
    """Half mean squared tangent-norm residual against the kernel score.

    batch: dict with x0 (n,4), t (n,), xt (n,4), optional cond.
    """
    from . import autodiff as ad

    x0, t, xt = batch["x0"], np.atleast_1d(batch["t"]), batch["xt"]
    cond = batch.get("cond")
    tau = schedule.integrated_beta(t)
    target = heat_kernel_score(xt, x0, tau)
    feats = matrix_features(xt)
    traced = any(isinstance(p, ad.Tensor) for p in params.values())
    out = score_net.apply(params, ad.Tensor(feats) if traced else feats, t, cond)
    diff = out - (ad.Tensor(target) if traced else target)
    if traced:
        return (diff * diff).sum() * (0.5 / feats.shape[0])
    return float(0.5 * np.mean(np.sum(diff * diff, axis=-1)))


class TangentScoreNet:
    """Scales a raw network output by 1/sqrt(tau(t)), the natural score
    magnitude, so regression targets stay O(1) across times."""

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
        tau = np.atleast_1d(self.schedule.integrated_beta(np.atleast_1d(t)))
        factor = 1.0 / np.sqrt(tau)
        if raw.ndim == 2:
            factor = factor[:, None] if factor.size > 1 else float(factor[0])
        else:
            factor = float(factor[0])
        return raw * factor


def geodesic_random_walk_reverse(score_fn, schedule, n_steps, rng, n_samples=1,
                                 t_eps=None):
    """Reverse sampler: geodesic random walk from the uniform law.

    score_fn(x_quats, t_forward) -> (n, 3) body-frame score estimates.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen = as_generator(rng)
    T = schedule.horizon_T
    eps = 1e-3 * T if t_eps is None else t_eps
    h = (T - eps) / n_steps
    x = uniform_rotation(n_samples, gen)
    for k in range(n_steps):
        tf = T - k * h
        beta = schedule.beta_at(tf)
        drift = beta * np.asarray(score_fn(x, tf)) * h
        noise = np.sqrt(beta * h) * gen.standard_normal((n_samples, 3))
        step = drift + noise
        if not np.all(np.isfinite(step)):
            raise FloatingPointError(f"non-finite tangent update at reverse step {k}")
        x = exp_at(x, step)
    return x


def net_score_fn(score_net, params, cond=None):
    def fn(x, t):
        c = cond
        if c is not None and np.asarray(c).ndim == 1:
            c = np.broadcast_to(np.asarray(c)[None, :], (x.shape[0], len(c)))
        return score_net.apply(params, matrix_features(x), t, c)

    return fn


def wrapped_normal_sample(mean, sigma, rng, n=1):
    """Pushforward of a tangent Gaussian: w ~ N(0, sigma^2) 3x3,
    v = (w - w^T)/2, x = exp_mean(vec(v))."""
    gen = as_generator(rng)
    w = sigma * gen.standard_normal((n, 3, 3))
    v = 0.5 * (w - np.swapaxes(w, -1, -2))
    # coefficients in the V(axis) convention used throughout
    vec = np.stack([v[:, 1, 2], v[:, 2, 0], v[:, 0, 1]], axis=-1)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (n, 4))
    return exp_at(mean, vec)


def wrapped_normal_mixture_sample(means, sigmas, rng, n=1, m=None):
    """Uniform mixture of wrapped normals; returns (rotations, components)."""
    means = np.asarray(means, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if means.shape[0] == 0:
        raise ValueError("empty mixture")
    if means.shape[0] != sigmas.shape[0]:
        raise ValueError("means and sigmas must have equal length")
    if np.any(sigmas < 0):
        raise ValueError("sigmas must be nonnegative")
    gen = as_generator(rng)
    comps = np.full(n, m) if m is not None else gen.integers(0, means.shape[0], size=n)
    out = np.empty((n, 4))
    for c in np.unique(comps):
        sel = comps == c
        if sigmas[c] == 0.0:
            out[sel] = means[c]
        else:
            out[sel] = wrapped_normal_sample(means[c], sigmas[c], gen, n=int(sel.sum()))
    return out, comps
