"""Tests for the brute-force verification suite on tiny finite models."""

import json

import numpy as np
from scipy.linalg import expm

from dmm.core import DiscreteGenerator, kl_discrete, phi_discrete
from dmm.verify import (
    TinyModel,
    check_discretization,
    check_elbo_bound,
    check_kl_decay,
    check_objective_equivalence,
    check_phi_properties,
    ism_integrand,
    objective_values,
    per_step_gap,
    random_generator,
    reverse_generator,
    run_all,
)


def make_model(seed=3, n=3, T=1.0):
    gen = np.random.default_rng(seed)
    return TinyModel(random_generator(n, gen), gen.dirichlet(np.ones(n) * 2), T), gen


class TestPhiProperties:
    def test_constant_f_is_zero(self):
        gen = np.random.default_rng(0)
        for _ in range(20):
            B = random_generator(4, gen)
            phi = phi_discrete(B, np.full(4, float(np.exp(gen.normal()))))
            assert np.max(np.abs(phi)) <= 1e-12

    def test_thousand_trials_nonnegative(self):
        rep = check_phi_properties(1000, np.random.default_rng(1))
        assert rep["status"] == "pass"
        assert rep["metric"] >= -1e-12

    def test_nonergodic_invariant_pair(self):
        # reducible chain: the ratio of two invariant laws is non-constant
        # across blocks yet the operator vanishes everywhere
        rep = check_phi_properties(10, np.random.default_rng(2))
        assert rep["witness"]["nonergodic_max_abs_phi"] <= 1e-12


class TestKlDecay:
    def test_equal_laws_both_sides_zero(self):
        gen = np.random.default_rng(3)
        B = random_generator(3, gen)
        pi = gen.dirichlet(np.ones(3) * 2)
        rep = check_kl_decay(B, pi, pi)
        assert abs(rep["witness"]["derivative"]) <= 1e-8
        assert abs(rep["witness"]["negative_phi_mean"]) <= 1e-12
        assert rep["status"] == "pass"

    def test_relative_error_small(self):
        gen = np.random.default_rng(4)
        B = random_generator(3, gen)
        pi1 = gen.dirichlet(np.ones(3) * 2)
        pi2 = gen.dirichlet(np.ones(3) * 2)
        rep = check_kl_decay(B, pi1, pi2, t=0.3, h=1e-4)
        assert rep["status"] == "pass"
        assert rep["metric"] <= 1e-4

    def test_kl_nonincreasing_on_grid(self):
        gen = np.random.default_rng(5)
        B = random_generator(4, gen)
        pi1 = gen.dirichlet(np.ones(4) * 2)
        pi2 = gen.dirichlet(np.ones(4) * 2)
        ts = np.linspace(0.0, 2.0, 40)
        kls = [kl_discrete(pi1 @ expm(t * B.rates), pi2 @ expm(t * B.rates))
               for t in ts]
        assert np.all(np.diff(kls) <= 1e-12)


class TestObjectiveEquivalence:
    def test_exact_marginal_kills_esm_integrand(self):
        # with the exact marginal as candidate the pointwise operator term
        # is zero (constant ratio) and the explicit integrand sums to zero
        model, _ = make_model(seed=6)
        for t in (0.1, 0.5, 0.9):
            qt = model.marginal(t)
            assert np.max(np.abs(phi_discrete(model.B, np.ones(3)))) <= 1e-13
            esm_t = qt @ ism_integrand(model.B, qt) \
                - qt @ (model.B.rates @ np.log(qt))
            assert abs(esm_t) <= 1e-12

    def test_twenty_candidates_variance(self):
        model, gen = make_model(seed=7)
        cands = [np.exp(gen.normal(size=3)) for _ in range(20)]
        rep = check_objective_equivalence(model, cands)
        assert rep["status"] == "pass"
        assert rep["metric"] <= 1e-10

    def test_constant_rescaling_invariance(self):
        # multiplying the candidate by a spatial constant changes none of
        # the objectives, so the argmin over any candidate grid is unchanged
        model, gen = make_model(seed=8)
        cands = [np.exp(gen.normal(size=3)) for _ in range(6)]
        base = np.array([objective_values(model, b, n_grid=256)[0]
                         for b in cands])
        scaled = np.array([objective_values(model, 4.2 * b, n_grid=256)[0]
                           for b in cands])
        assert np.max(np.abs(base - scaled)) <= 1e-10
        assert np.argmin(base) == np.argmin(scaled)


class TestDiscretization:
    def test_slope_in_range(self):
        model, gen = make_model(seed=9)
        rep = check_discretization(model, rng=gen)
        assert rep["status"] == "pass"
        assert 1.8 <= rep["metric"] <= 2.5

    def test_exact_marginal_candidate(self):
        model, _ = make_model(seed=10)
        rep = check_discretization(model, betas=[model.marginal(0.3)], s=0.3)
        assert rep["status"] == "pass"

    def test_both_sides_vanish(self):
        model, gen = make_model(seed=11)
        beta = np.exp(gen.normal(size=3))
        qs = model.marginal(0.3)
        for g in (1e-2, 1e-4, 1e-6):
            lhs = g * float(qs @ ism_integrand(model.B, beta))
            assert abs(lhs) <= 10 * g
            assert per_step_gap(model, beta, 0.3, g) <= abs(lhs) + 10 * g

    def test_reverse_generator_rows_sum_to_zero(self):
        model, gen = make_model(seed=12)
        A = reverse_generator(model.B, np.exp(gen.normal(size=3)))
        assert np.allclose(A.sum(axis=1), 0.0, atol=1e-12)
        off = A[~np.eye(3, dtype=bool)]
        assert np.all(off >= 0)


class TestElboBound:
    def test_exact_candidate_tight(self):
        model, _ = make_model(seed=13)
        rep = check_elbo_bound(model)
        assert rep["status"] == "pass"
        assert abs(rep["metric"]) <= 1e-6

    def test_perturbed_candidate_positive_gap(self):
        model, gen = make_model(seed=14)
        noise = gen.normal(size=3)

        def beta_fn(t):
            return model.marginal(t) * np.exp(0.3 * noise)

        rep = check_elbo_bound(model, beta_fn=beta_fn, n_grid=2000)
        assert rep["status"] == "pass"
        assert rep["metric"] > 10 * rep["witness"]["discretization_error"]

    def test_random_candidates_never_violate(self):
        model, gen = make_model(seed=15)
        for _ in range(5):
            b = np.exp(gen.normal(size=3))
            rep = check_elbo_bound(model, beta_fn=lambda t: b, n_grid=2000)
            assert rep["status"] == "pass"


class TestSuite:
    def test_report_format(self):
        reports = run_all(seed=0)
        assert len(reports) == 5
        for rep in reports:
            assert set(rep) == {"check", "status", "metric", "tolerance",
                                "witness"}
            assert rep["status"] in ("pass", "fail")
            assert isinstance(rep["metric"], float)
            json.dumps(rep)  # must be serializable

    def test_default_suite_passes(self):
        assert all(r["status"] == "pass" for r in run_all(seed=0))

    def test_deterministic_under_seed(self):
        a = json.dumps(run_all(seed=42), sort_keys=True)
        b = json.dumps(run_all(seed=42), sort_keys=True)
        assert a == b


class TestTinyModel:
    def test_rejects_large_state_space(self):
        gen = np.random.default_rng(16)
        B = random_generator(17, gen)
        try:
            TinyModel(B, np.ones(17) / 17, T=1.0)
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError for > 16 states")

    def test_rejects_bad_initial(self):
        gen = np.random.default_rng(17)
        B = random_generator(3, gen)
        try:
            TinyModel(B, np.array([0.5, 0.6, 0.1]), T=1.0)
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError for non-probability q0")
