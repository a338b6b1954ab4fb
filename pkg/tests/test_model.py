import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenlab.grids import DensityGrid, tensor_weights
from screenlab.model import (CostSpec, Primitives, UtilitySpec, closed_form_example, eval_utility,
                             primitives_from_config, uniform_square_primitives)

pos = st.floats(0.05, 5.0)


class TestEvalUtility:
    def test_linear(self):
        assert eval_utility(UtilitySpec("linear"), [0.5, 0.5], [1.0, 2.0]) == pytest.approx(1.5)

    def test_bilinear(self):
        assert eval_utility(UtilitySpec("bilinear"), [1, 1], [1, 1], X1=[2.0, 0.5]) == pytest.approx(2.5)

    def test_power(self):
        u = UtilitySpec("nonlinear", omega=(0.5, 0.5))
        assert eval_utility(u, [1, 1], [4, 9], X1=[1, 1]) == pytest.approx(5.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            eval_utility(UtilitySpec("linear"), [1, 1, 1], [1, 1])

    def test_negative_q_outside_domain(self):
        with pytest.raises(ValueError, match="domain"):
            eval_utility(UtilitySpec("nonlinear", omega=(0.5, 0.5)), [1, 1], [-1, 1])

    def test_bilinear_needs_covariates(self):
        with pytest.raises(ValueError):
            eval_utility(UtilitySpec("bilinear"), [1, 1], [1, 1])

    @given(st.lists(pos, min_size=2, max_size=2), st.lists(pos, min_size=2, max_size=2),
           st.integers(0, 1), st.floats(0.01, 1.0), st.sampled_from(["linear", "nonlinear"]))
    def test_monotone_in_theta_and_q(self, theta, q, j, bump, variant):
        u = UtilitySpec(variant, omega=(0.5, 0.7) if variant == "nonlinear" else None)
        base = eval_utility(u, theta, q, X1=[1.0, 1.0])
        t2 = np.array(theta)
        t2[j] += bump
        q2 = np.array(q)
        q2[j] += bump
        assert eval_utility(u, t2, q, X1=[1.0, 1.0]) > base
        assert eval_utility(u, theta, q2, X1=[1.0, 1.0]) > base


class TestUtilitySpec:
    @given(st.floats(0.1, 1.0), st.floats(0.1, 1.0))
    def test_power_invariants(self, w1, w2):
        u = UtilitySpec("nonlinear", omega=(w1, w2))
        q = np.linspace(0, 3, 50)[:, None] * np.ones(2)
        v = u.v(q)
        assert np.all(v[0] == 0)
        assert np.all(np.diff(v, axis=0) > 0)
        assert np.all(u.dv(q[1:]) > 0)
        np.testing.assert_allclose(u.v_inv(v), q, atol=1e-12)

    def test_rejects_bad_exponent(self):
        with pytest.raises(ValueError):
            UtilitySpec("nonlinear", omega=(0.5, -1.0))


class TestCostAndPrimitives:
    def test_quadratic_strongly_convex(self, rng):
        c = CostSpec.quadratic(2.0)
        assert c.check_strong_convexity(rng.uniform(0, 1, (50, 2)))
        np.testing.assert_allclose(c.grad([[1.0, 2.0]]), [[2.0, 4.0]])
        assert c.value([[1.0, 2.0]])[0] == pytest.approx(5.0)

    def test_polynomial_gradient(self):
        c = CostSpec("polynomial", {"terms": {(2, 0): 0.5, (0, 2): 0.5, (4, 0): 0.1}})
        q = np.array([[0.3, 0.7]])
        np.testing.assert_allclose(c.grad(q), [[0.3 + 0.4 * 0.3 ** 3, 0.7]], rtol=1e-12)

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            CostSpec.quadratic(0.0)

    def test_density_integrates_to_one(self):
        prim = uniform_square_primitives(1.0, 51)
        assert prim.density.mass() == pytest.approx(1.0, abs=1e-6)
        assert np.all(prim.density.values > 0)

    def test_infeasible_outside_option(self):
        with pytest.raises(ValueError, match="P0"):
            Primitives(DensityGrid.uniform(n=11), CostSpec("quadratic", {"c": 1.0, "c0": 0.5}), P0=0.0)

    def test_unnormalized_density_rejected(self):
        d = DensityGrid.from_function(lambda x, y: 2 + 0 * x, ((0, 1), (0, 1)), 11, normalize=False)
        with pytest.raises(ValueError, match="integrate"):
            Primitives(d, CostSpec.quadratic())

    def test_from_config(self):
        prim = primitives_from_config({"density": {"kind": "gaussian", "n": 31}, "cost": {"kind": "quadratic", "c": 2.0}})
        assert prim.density.shape == (31, 31)
        np.testing.assert_allclose(prim.cost.params["A"], 2 * np.eye(2))

    def test_from_config_unknown_density(self):
        with pytest.raises(ValueError, match="density.kind"):
            primitives_from_config({"density": {"kind": "cauchy"}})

    def test_sampler_matches_density(self, rng):
        d = DensityGrid.from_function(lambda x, y: 1 + x, ((0, 1), (0, 1)), 21)
        pts = d.sample(40000, rng)
        # marginal of x has density (1 + x) / 1.5, mean 5/9
        assert pts[:, 0].mean() == pytest.approx(5 / 9, abs=0.01)
        assert pts[:, 1].mean() == pytest.approx(0.5, abs=0.01)


class TestClosedForm:
    def test_tau0(self):
        assert closed_form_example(1.0).tau0 == pytest.approx(0.81650, abs=1e-5)

    def test_rho_b_at_tau0_is_zero(self):
        cf = closed_form_example(1.0)
        assert float(cf.rho_b(np.sqrt(2 / 3))) == pytest.approx(0.0, abs=1e-15)

    def test_rho_b_at_one(self):
        assert float(closed_form_example(1.0).rho_b(1.0)) == pytest.approx(0.25)

    def test_excluded_example(self):
        # tau = 0.4 lies below sqrt(6)/3
        assert closed_form_example(1.0).region([[0.2, 0.2]])[0] == 0

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            closed_form_example(-1.0)

    def test_stated_tau1_restates_tau0(self):
        cf = closed_form_example(1.0)
        assert cf.tau1_stated == pytest.approx(cf.tau0, abs=1e-10)

    @given(st.floats(0.05, 20.0))
    def test_rho_b_vanishes_at_tau0_for_all_c(self, c):
        cf = closed_form_example(c)
        assert abs(float(cf.rho_b(cf.tau0))) <= 1e-12 / c

    @given(st.floats(0.1, 10.0))
    def test_rho_b_increasing_above_tau0(self, c):
        cf = closed_form_example(c)
        t = np.linspace(cf.tau0, 2.0, 200)
        assert np.all(np.diff(cf.rho_b(t)) > 0)

    def test_classifier_partitions_square(self, rng):
        lab = closed_form_example(1.0).with_tau1(1.3).region(rng.uniform(0, 1, (5000, 2)))
        assert set(np.unique(lab)) <= {0, 1, 2}
        assert len(lab) == 5000

    def test_excluded_mass_converges_to_one_third(self):
        # oracle: trapezoidal mass of lattice nodes below the line, independent of the classifier
        cf = closed_form_example(1.0)
        errs = []
        for n in (51, 201, 801):
            ax = np.linspace(0, 1, n)
            X, Y = np.meshgrid(ax, ax, indexing="ij")
            w = tensor_weights((ax, ax))
            errs.append(abs(np.sum(w * (X + Y < cf.tau0)) - 1 / 3))
        assert cf.tau0 ** 2 / 2 == pytest.approx(1 / 3, abs=1e-12)
        assert errs[-1] < errs[0] and errs[-1] < 2e-3
