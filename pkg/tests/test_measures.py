import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from krdiv.chaos import ChaosFn, gauss_hermite_grid, multi_indices
from krdiv.malliavin import ou_semigroup
from krdiv.measures import (
    Component,
    GaussianMixture,
    MeasureSpecError,
    SingularCovarianceError,
    conditional_expectation,
    density_chaos,
    density_vs_mu,
    difference_density,
    epsilon_mix,
    load_measure,
    measure_from_dict,
    measure_to_dict,
    ou_smooth_measure,
    project_measure,
    restrict_to_leading,
    sample,
    standard_gaussian,
)


def mixture_2d():
    return GaussianMixture.from_parts(
        [0.3, 0.7], [[0.5, -0.2], [-0.4, 0.6]], [[[0.8, 0.1], [0.1, 1.1]], np.eye(2) * 0.9]
    )


class TestValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(MeasureSpecError):
            GaussianMixture(1, (Component(0.5, [0.0], [[1.0]]),))

    def test_asymmetric_cov(self):
        with pytest.raises(MeasureSpecError, match="symmetric"):
            GaussianMixture(2, (Component(1.0, [0, 0], [[1, 0.2], [0, 1]]),))

    def test_indefinite_cov(self):
        with pytest.raises(MeasureSpecError, match="PSD"):
            GaussianMixture(1, (Component(1.0, [0.0], [[-1.0]]),))

    def test_spec_errors_name_the_field(self):
        spec = {"dim": 2, "components": [{"weight": 1.0, "mean": [0.0], "cov": np.eye(2).tolist()}]}
        with pytest.raises(MeasureSpecError) as info:
            measure_from_dict(spec)
        assert info.value.field == "components[0].mean"
        with pytest.raises(MeasureSpecError) as info:
            measure_from_dict({"components": []})
        assert info.value.field == "dim"

    def test_roundtrip(self, tmp_path):
        m = mixture_2d()
        path = tmp_path / "m.json"
        path.write_text(json.dumps(measure_to_dict(m)))
        back = load_measure(path)
        assert measure_to_dict(back) == measure_to_dict(m)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(MeasureSpecError):
            load_measure(path)


class TestDensity:
    def test_reference_is_one(self):
        x = np.random.default_rng(0).standard_normal((10, 3))
        np.testing.assert_allclose(density_vs_mu(standard_gaussian(3), x), 1.0, rtol=1e-13)

    def test_shifted(self):
        m = GaussianMixture.single([0.5], [[1.0]])
        assert density_vs_mu(m, [0.0]) == pytest.approx(math.exp(-0.125), rel=1e-13)

    def test_against_scipy(self):
        m = mixture_2d()
        x = np.random.default_rng(1).standard_normal((20, 2)) * 2
        ref = sum(
            c.weight * multivariate_normal(c.mean, c.cov).pdf(x) for c in m.components
        ) / multivariate_normal(np.zeros(2), np.eye(2)).pdf(x)
        np.testing.assert_allclose(density_vs_mu(m, x), ref, rtol=1e-10)

    def test_total_mass(self):
        g = gauss_hermite_grid(2, 40)
        assert g.integrate(density_vs_mu(mixture_2d(), g.nodes)) == pytest.approx(1.0, abs=1e-8)

    def test_point_mass_rejected(self):
        m = GaussianMixture.single([0.3], [[0.0]])
        with pytest.raises(SingularCovarianceError):
            density_vs_mu(m, [0.0])

    def test_l2_condition(self):
        assert GaussianMixture.single([0.0], [[1.9]]).l2_density()
        assert not GaussianMixture.single([0.0], [[2.1]]).l2_density()

    def test_difference_density_rejects_heavy_tails(self):
        wide = GaussianMixture.single([0.0], [[3.0]])
        with pytest.raises(ValueError):
            difference_density(standard_gaussian(1), wide, 4, gauss_hermite_grid(1, 20))

    def test_difference_density_mean_removed(self):
        a, adj = difference_density(standard_gaussian(2), mixture_2d(), 6, gauss_hermite_grid(2, 30))
        assert a.mean == 0.0
        assert adj < 1e-10


class TestSmoothing:
    def test_zero_time(self):
        m = mixture_2d()
        assert ou_smooth_measure(m, 0.0) is m

    def test_point_mass(self):
        z, t = np.array([1.5, -0.5]), 0.3
        s = ou_smooth_measure(GaussianMixture.single(z, np.zeros((2, 2))), t)
        c = s.components[0]
        np.testing.assert_allclose(c.mean, math.exp(-t) * z)
        np.testing.assert_allclose(c.cov, (1 - math.exp(-2 * t)) * np.eye(2))

    def test_long_time_limit(self):
        c = ou_smooth_measure(mixture_2d(), 40.0).components[0]
        np.testing.assert_allclose(c.mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(c.cov, np.eye(2), atol=1e-15)

    @pytest.mark.parametrize("t", [0.05, 0.2, 1.0])
    def test_commutes_with_chaos_projection(self, t):
        g = gauss_hermite_grid(2, 40)
        m = mixture_2d()
        lhs = density_chaos(ou_smooth_measure(m, t), 8, g)
        rhs = ou_semigroup(density_chaos(m, 8, g), t)
        assert lhs.max_abs_diff(rhs) < 1e-6

    def test_l1_contraction(self):
        g = gauss_hermite_grid(1, 80)
        nu0 = GaussianMixture.from_parts([0.5, 0.5], [[1.0], [-1.0]], [[[0.5]], [[0.5]]])
        nu1 = standard_gaussian(1)
        base = g.integrate(np.abs(density_vs_mu(nu1, g.nodes) - density_vs_mu(nu0, g.nodes)))
        for t in (0.1, 0.5):
            s0, s1 = ou_smooth_measure(nu0, t), ou_smooth_measure(nu1, t)
            val = g.integrate(np.abs(density_vs_mu(s1, g.nodes) - density_vs_mu(s0, g.nodes)))
            assert val <= base + 1e-9


class TestMixing:
    def test_fixed_point(self):
        m = epsilon_mix(standard_gaussian(2), 0.3)
        assert len(m.components) == 1
        assert m.components[0].weight == pytest.approx(1.0)

    def test_small_epsilon(self):
        m = epsilon_mix(mixture_2d(), 1e-9)
        np.testing.assert_allclose(m.weights[:2], mixture_2d().weights, atol=1e-8)

    def test_density_floor(self):
        eps = 0.05
        m = epsilon_mix(mixture_2d(), eps)
        x = np.random.default_rng(3).normal(scale=3.0, size=(10_000, 2))
        assert density_vs_mu(m, x).min() >= eps / (1 + eps) - 1e-12

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            epsilon_mix(mixture_2d(), 0.0)


class TestProjections:
    def test_marginal(self):
        m = GaussianMixture.single([1.0, 2.0], np.diag([1.0, 4.0]))
        p = project_measure(m, 1)
        assert p.dim == 1
        np.testing.assert_allclose(p.components[0].mean, [1.0])
        np.testing.assert_allclose(p.components[0].cov, [[1.0]])
        assert project_measure(m, 2).dim == 2
        assert p.weights.sum() == pytest.approx(1.0)

    def test_conditional_expectation(self):
        f = ChaosFn.basis((1, 1))
        assert conditional_expectation(f, 1).norm_sq() == 0.0
        g = ChaosFn.from_vector(2, 3, np.arange(10.0))
        assert conditional_expectation(g, 2).max_abs_diff(g) == 0.0

    def test_conditional_expectation_by_quadrature(self):
        # integrate out the second coordinate explicitly
        rng = np.random.default_rng(7)
        f = ChaosFn.from_vector(2, 4, rng.standard_normal(15))
        g1 = gauss_hermite_grid(1, 10)
        x1 = np.linspace(-2, 2, 5)
        ref = [g1.integrate(f.eval(np.column_stack([np.full(10, a), g1.nodes[:, 0]]))) for a in x1]
        got = restrict_to_leading(conditional_expectation(f, 1), 1).eval(x1[:, None])
        np.testing.assert_allclose(got, ref, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_tower_and_contraction(self, seed):
        rng = np.random.default_rng(seed)
        f = ChaosFn.from_vector(3, 4, rng.standard_normal(len(multi_indices(3, 4))))
        e2 = conditional_expectation(f, 2)
        assert conditional_expectation(e2, 1).max_abs_diff(conditional_expectation(f, 1)) == 0.0
        assert e2.norm_sq() <= f.norm_sq()

    def test_restrict_rejects_dependence(self):
        with pytest.raises(ValueError):
            restrict_to_leading(ChaosFn.basis((0, 1)), 1)


class TestSampling:
    def test_mean(self):
        s = sample(GaussianMixture.single([0.5], [[1.0]]), 100_000, 11)
        assert abs(s.atoms.mean() - 0.5) < 3 / math.sqrt(100_000)

    def test_reproducible_and_uniform(self):
        a, b = sample(mixture_2d(), 50, 5), sample(mixture_2d(), 50, 5)
        np.testing.assert_array_equal(a.atoms, b.atoms)
        np.testing.assert_allclose(a.weights, 1 / 50)

    def test_mixture_moments(self):
        m = mixture_2d()
        s = sample(m, 200_000, 2)
        np.testing.assert_allclose(s.atoms.mean(axis=0), m.mean(), atol=0.01)

    def test_component_law(self):
        # KS test of a 1-D mixture against its exact CDF
        from scipy.stats import kstest

        m = GaussianMixture.from_parts([0.4, 0.6], [[-1.0], [1.5]], [[[0.5]], [[1.0]]])
        s = sample(m, 5000, 8).atoms[:, 0]

        def cdf(x):
            return 0.4 * norm.cdf(x, -1.0, math.sqrt(0.5)) + 0.6 * norm.cdf(x, 1.5, 1.0)

        assert kstest(s, cdf).pvalue > 1e-3
