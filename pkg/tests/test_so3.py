import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import ks_2samp

from dmm import so3
from dmm.core import RateSchedule, RngStream


def mean_rotation(quats):
    """Chordal mean via the dominant eigenvector of the outer-product sum."""
    M = np.einsum("ni,nj->ij", quats, quats)
    w, v = np.linalg.eigh(M)
    return so3.quat_canonical(v[:, -1])


class TestRotationAlgebra:
    def test_identity_axis_angle(self):
        q = so3.rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.0)
        assert np.allclose(q, [1.0, 0.0, 0.0, 0.0])

    def test_quarter_turn_handedness(self):
        q = so3.rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.pi / 2)
        R = so3.quat_to_matrix(q)
        assert np.allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, -1.0, 0.0], atol=1e-12)
        assert np.allclose(np.abs(R)[np.abs(R) > 0.5], 1.0)
        assert np.allclose(R, so3.rodrigues_matrix(np.array([0.0, 0.0, 1.0]), np.pi / 2),
                           atol=1e-12)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            ax = rng.normal(size=3)
            ax /= np.linalg.norm(ax)
            al = rng.uniform(1e-6, np.pi - 1e-6)
            q = so3.rotation_from_axis_angle(ax, al)
            ax2, al2 = so3.axis_angle_from_rotation(
                so3.matrix_to_quat(so3.quat_to_matrix(q)))
            assert np.linalg.norm(ax * al - ax2 * al2) < 1e-9

    def test_matrix_orthogonal_det_one(self):
        qs = so3.uniform_rotation(200, RngStream(1))
        R = so3.quat_to_matrix(qs)
        assert np.max(np.abs(np.einsum("nij,nkj->nik", R, R) - np.eye(3))) < 1e-10
        assert np.allclose(np.linalg.det(R), 1.0, atol=1e-10)

    def test_exp_log_inverse(self):
        a = so3.uniform_rotation(500, RngStream(2))
        b = so3.uniform_rotation(500, RngStream(3))
        keep = so3.geodesic_distance(a, b) < np.pi - 1e-3
        v = so3.log_map(a[keep], b[keep])
        # arccos near dot = 1 limits achievable precision to ~sqrt(eps)
        assert np.max(so3.geodesic_distance(so3.exp_at(a[keep], v), b[keep])) < 1e-7

    def test_log_norm_is_distance(self):
        a = so3.uniform_rotation(100, RngStream(4))
        b = so3.uniform_rotation(100, RngStream(5))
        v = so3.log_map(a, b)
        assert np.allclose(np.linalg.norm(v, axis=1), so3.geodesic_distance(a, b),
                           atol=1e-10)

    def test_non_unit_axis_rejected(self):
        with pytest.raises(ValueError):
            so3.rotation_from_axis_angle(np.array([0.0, 0.0, 2.0]), 0.3)


class TestKernelDensity:
    def test_long_time_uniform_angle_law(self):
        k = so3.IGSO3Kernel(50.0)
        a = np.linspace(1e-3, np.pi - 1e-3, 200)
        assert np.max(np.abs(k.angle_density(a) - (1 - np.cos(a)) / np.pi)) < 1e-6

    def test_normalization(self):
        for t in (0.05, 0.5, 5.0):
            k = so3.IGSO3Kernel(t)
            val, _ = quad(k.angle_density, 0.0, np.pi, limit=200)
            assert abs(val - 1.0) < 1e-3

    def test_crossover_agreement(self):
        k = so3.IGSO3Kernel(1.0)
        a = np.linspace(1e-4, np.pi, 400)
        s, st = k.series_density(a), k.small_time_density(a)
        assert np.max(np.abs(s - st)) / np.max(s) < 0.02

    def test_tail_bound_controls_cutoff(self):
        for t in (1.0, 2.0, 5.0):
            L = so3.series_ell_max(t)
            assert (2 * L + 3) * np.exp(-L * (L + 1) * t / 2) <= 1e-8
        assert so3.series_ell_max(1.0) <= 8

    def test_relative_density_consistent_regimes(self):
        # small-time and series relative log densities agree at the threshold
        a = np.linspace(0.3, 2.5, 50)
        k = so3.IGSO3Kernel(1.0)
        series_log = np.log(k.series_density(a) / ((1 - np.cos(a)) / np.pi))
        small_log = np.log(k.small_time_density(a) / ((1 - np.cos(a)) / np.pi))
        assert np.max(np.abs(series_log - small_log)) < 1e-8


class TestSampling:
    def test_long_time_uniform(self):
        k = so3.IGSO3Kernel(50.0)
        center = so3.rotation_from_axis_angle(np.array([1.0, 0.0, 0.0]), 0.7)
        qs = so3.sample_igso3(k, center, RngStream(6), n=100_000)
        R = so3.quat_to_matrix(qs)
        se = np.sqrt(1.0 / 3.0 / qs.shape[0])
        assert np.max(np.abs(R.mean(axis=0))) < 3 * se

    def test_angle_ks_against_density(self):
        k = so3.IGSO3Kernel(0.5)
        center = so3.uniform_rotation(1, RngStream(7))[0]
        qs = so3.sample_igso3(k, center, RngStream(8), n=100_000)
        ang = np.sort(so3.geodesic_distance(qs, center))
        grid = np.linspace(0.0, np.pi, 4097)
        d = np.maximum(k.angle_density(grid), 0.0)
        cdf = np.concatenate([[0.0], np.cumsum((d[1:] + d[:-1]) / 2 * np.diff(grid))])
        cdf /= cdf[-1]
        emp = np.searchsorted(ang, grid, side="right") / len(ang)
        assert np.max(np.abs(emp - cdf)) <= 0.01

    def test_brownian_scaling(self):
        center = so3.uniform_rotation(1, RngStream(9))[0]
        means = []
        for t in (1e-3, 4e-3, 1.6e-2):
            qs = so3.sample_igso3(so3.IGSO3Kernel(t), center, RngStream(10), n=20_000)
            means.append(so3.geodesic_distance(qs, center).mean())
        assert means[1] / means[0] == pytest.approx(2.0, rel=0.05)
        assert means[2] / means[1] == pytest.approx(2.0, rel=0.05)

    def test_chapman_kolmogorov(self):
        center = so3.uniform_rotation(1, RngStream(11))[0]
        rng = RngStream(12)
        mid = so3.sample_igso3(so3.IGSO3Kernel(0.2), center, rng, n=100_000)
        two_step = so3.sample_igso3(so3.IGSO3Kernel(0.3), mid, rng)
        direct = so3.sample_igso3(so3.IGSO3Kernel(0.5), center, RngStream(13), n=100_000)
        a1 = so3.geodesic_distance(two_step, center)
        a2 = so3.geodesic_distance(direct, center)
        assert ks_2samp(a1, a2).statistic <= 0.015

    def test_kernel_symmetry_under_left_multiplication(self):
        g = so3.uniform_rotation(1, RngStream(14))[0]
        x0 = so3.uniform_rotation(50, RngStream(15))
        xt = so3.uniform_rotation(50, RngStream(16))
        a = so3.geodesic_distance(xt, x0)
        b = so3.geodesic_distance(so3.quat_mul(g, xt), so3.quat_mul(g, x0))
        assert np.max(np.abs(a - b)) < 1e-10


class TestScore:
    def test_zero_at_center(self):
        q = so3.uniform_rotation(1, RngStream(17))[0]
        assert np.allclose(so3.heat_kernel_score(q, q, 1.5), 0.0, atol=1e-9)

    def test_direction_toward_center(self):
        rng = RngStream(18)
        x0 = so3.uniform_rotation(1000, rng)
        xt = so3.sample_igso3(so3.IGSO3Kernel(1.3), x0, rng)
        s = so3.heat_kernel_score(xt, x0, 1.3)
        v = so3.log_map(xt, x0)
        keep = np.linalg.norm(v, axis=1) > 1e-6
        dots = np.sum(s[keep] * v[keep], axis=1)
        assert np.all(dots >= -1e-12)

    def test_varadhan_direction(self):
        rng = RngStream(19)
        x0 = so3.uniform_rotation(200, rng)
        xt = so3.sample_igso3(so3.IGSO3Kernel(0.3), x0, rng)
        s = so3.heat_kernel_score(xt, x0, 0.3)
        v = so3.log_map(xt, x0)
        assert np.allclose(s, v / 0.3, atol=1e-12)

    def test_score_vs_finite_differences(self):
        rng = RngStream(20)
        worst = 0.0
        for t in (1.5, 2.5):
            k = so3.IGSO3Kernel(t)
            for _ in range(25):
                x0 = so3.uniform_rotation(1, rng)[0]
                xt = so3.sample_igso3(k, x0, rng)
                s = so3.heat_kernel_score(xt, x0, t)
                for _ in range(2):
                    e = rng.generator.normal(size=3)
                    e /= np.linalg.norm(e)
                    h = 1e-5

                    def ld(eps):
                        xp = so3.exp_at(xt, eps * e)
                        return k.relative_log_density(so3.geodesic_distance(xp, x0))

                    fd = (ld(h) - ld(-h)) / (2 * h)
                    worst = max(worst, abs(fd - float(s @ e)) / max(abs(fd), 1e-3))
        assert worst <= 1e-4


SCHED = RateSchedule(0.001, 20.0, 1.0)  # integrated beta at T ~ 10


class TestDsmLoss:
    def test_teacher_injection_zero(self):
        rng = RngStream(21)
        x0 = so3.uniform_rotation(64, rng)
        t = rng.generator.uniform(0.1, 1.0, size=64)
        tau = SCHED.integrated_beta(t)
        xt = np.stack([so3.sample_igso3(so3.IGSO3Kernel(tv), x0i, rng)
                       for tv, x0i in zip(tau, x0)])

        class Teacher:
            def apply(self, params, feats, tt, cond=None):
                return so3.heat_kernel_score(xt, x0, tau)

        loss = so3.so3_dsm_loss(Teacher(), {}, {"x0": x0, "t": t, "xt": xt}, SCHED)
        assert loss == 0.0

    def test_zero_net_matches_radial_quadrature(self):
        rng = RngStream(22)
        x0 = so3.uniform_rotation(1, rng)[0]

        class Zero:
            def apply(self, params, feats, tt, cond=None):
                return np.zeros((feats.shape[0], 3))

        for tau in (0.3, 0.7, 1.5):
            n = 400_000
            xt = so3.sample_igso3(so3.IGSO3Kernel(tau), x0, rng, n=n)
            sched = RateSchedule(2 * tau, 2 * tau, 0.5)  # integrated_beta(0.5) = tau
            loss = so3.so3_dsm_loss(Zero(), {}, {
                "x0": np.broadcast_to(x0, (n, 4)), "t": np.full(n, 0.5), "xt": xt}, sched)
            k = so3.IGSO3Kernel(tau)
            if tau < 1.0:
                integrand = lambda a: 0.5 * (a / tau) ** 2 * k.angle_density(a)
            else:
                integrand = lambda a: 0.5 * k.dlog_relative_density(np.array([a]))[0] ** 2 \
                    * k.angle_density(a)
            expect, _ = quad(integrand, 1e-8, np.pi, limit=300)
            assert loss == pytest.approx(expect, rel=0.02)


class TestReverseSampler:
    def test_zero_score_preserves_uniform(self):
        out = so3.geodesic_random_walk_reverse(
            lambda x, t: np.zeros((x.shape[0], 3)), SCHED, 200, RngStream(23),
            n_samples=20_000)
        R = so3.quat_to_matrix(out)
        se = np.sqrt(1.0 / 3.0 / out.shape[0])
        assert np.max(np.abs(R.mean(axis=0))) < 3.5 * se

    def test_exact_score_concentrates_at_mean(self):
        # data law: heat kernel at sigma^2 = 0.09 about mu; semigroup gives
        # the exact noised score at every t
        mu = so3.rotation_from_axis_angle(
            np.array([1.0, 0.0, 0.0]) / 1.0, 0.9)
        t0 = 0.09

        def score(x, t):
            return so3.heat_kernel_score(x, mu, t0 + SCHED.integrated_beta(t))

        out = so3.geodesic_random_walk_reverse(score, SCHED, 500, RngStream(24),
                                               n_samples=2000)
        mbar = mean_rotation(out)
        assert so3.geodesic_distance(mbar, mu) <= 0.05
        # spread should match the target law's scale
        ang = so3.geodesic_distance(out, mu)
        assert 0.2 < ang.mean() < 0.7

    def test_quaternion_norm_drift(self):
        out = so3.geodesic_random_walk_reverse(
            lambda x, t: np.zeros((x.shape[0], 3)), SCHED, 1000, RngStream(25),
            n_samples=100)
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) <= 1e-9

    def test_nonfinite_reports_step(self):
        with pytest.raises(FloatingPointError, match="step 0"):
            so3.geodesic_random_walk_reverse(
                lambda x, t: np.full((x.shape[0], 3), np.nan), SCHED, 10, RngStream(26))


class TestWrappedNormal:
    def test_sigma_zero_returns_mean(self):
        mu = so3.uniform_rotation(1, RngStream(27))[0]
        out, comps = so3.wrapped_normal_mixture_sample([mu], [0.0], RngStream(28), n=5)
        assert np.allclose(np.abs(out @ mu), 1.0, atol=1e-12)
        assert np.all(comps == 0)

    def test_angle_histogram_self_consistent(self):
        mu = np.array([1.0, 0.0, 0.0, 0.0])
        a = so3.wrapped_normal_sample(mu, 0.2, RngStream(29), n=100_000)
        b = so3.wrapped_normal_sample(mu, 0.2, RngStream(30), n=1_000_000)
        ks = ks_2samp(so3.geodesic_distance(a, mu), so3.geodesic_distance(b, mu))
        assert ks.statistic <= 0.01

    def test_conditional_component(self):
        means = so3.uniform_rotation(3, RngStream(31))
        out, comps = so3.wrapped_normal_mixture_sample(means, [0.1] * 3, RngStream(32),
                                                       n=50, m=2)
        assert np.all(comps == 2)
        assert np.all(so3.geodesic_distance(out, means[2]) < 1.0)

    def test_empty_mixture_rejected(self):
        with pytest.raises(ValueError):
            so3.wrapped_normal_mixture_sample(np.zeros((0, 4)), [], RngStream(33))
