import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import RegularGridInterpolator

from screenlab.model import closed_form_example, uniform_square_primitives
from screenlab.simulate import (CovariateLaw, Dataset, NoiseSpec, SeparableGenerator, apply_price_noise,
                                apply_taste_shifter, sample_market, sample_shifted_markets)

PRIM = uniform_square_primitives(1.0, 101)
CF = closed_form_example(1.0)


def triangular_cdf(t):
    """CDF of the sum of two independent uniforms on [0, 1]."""
    t = np.asarray(t, float)
    return np.where(t <= 1, t ** 2 / 2, 1 - (2 - t) ** 2 / 2)


class TestSampleMarket:
    def test_deterministic(self, small_menu):
        prim, m = small_menu
        a = sample_market(m, prim, 1000, seed=7)
        b = sample_market(m, prim, 1000, seed=7)
        assert a.q.tobytes() == b.q.tobytes() and a.p.tobytes() == b.p.tobytes()

    def test_excluded_types_take_outside_option(self, small_menu):
        prim, m = small_menu
        ds = sample_market(m, prim, 5000, seed=1)
        ex = ds.truth["region"] == 0
        assert ex.any()
        np.testing.assert_array_equal(ds.q[ex], 0.0)
        np.testing.assert_array_equal(ds.p[ex], prim.P0)

    def test_prices_are_menu_prices(self, small_menu):
        # before noise a record's price is the menu's price for its type's node value
        prim, m = small_menu
        ds = sample_market(m, prim, 3000, seed=2)
        on = ds.truth["region"] != 0
        th = ds.truth["theta"][on]
        gross = np.sum(th * ds.q[on], axis=1)
        U = RegularGridInterpolator(m.axes, m.U)(th)
        np.testing.assert_allclose(ds.p[on], gross - U, atol=1e-12)

    def test_choices_inside_menu_choice_set(self, small_menu):
        prim, m = small_menu
        ds = sample_market(m, prim, 3000, seed=3)
        lo, hi = m.rho.reshape(-1, 2).min(0), m.rho.reshape(-1, 2).max(0)
        assert np.all(ds.q >= lo - 1e-12) and np.all(ds.q <= hi + 1e-12)

    def test_closed_form_outside_share(self):
        ds = sample_market(CF, PRIM, 100_000, seed=11)
        share = np.mean(np.all(ds.q == 0, axis=1))
        assert share == pytest.approx(CF.tau0 ** 2 / 2, abs=0.01)

    def test_empirical_cdf_converges_to_pushforward(self):
        # oracle: q1 = rho_b(tau) is increasing in tau, so P(q1 <= x) = P(tau <= rho_b^{-1}(x))
        x = np.linspace(0.01, 1.0, 60)
        tau_of_x = (4 * x + np.sqrt(16 * x ** 2 + 24)) / 6  # inverse of 3t/4 - 1/(2t) at c = 1
        exact = triangular_cdf(np.minimum(tau_of_x, 2.0))
        gaps = []
        for n in (1000, 100_000):
            q1 = sample_market(CF, PRIM, n, seed=5).q[:, 0]
            emp = np.searchsorted(np.sort(q1), x, side="right") / n
            gaps.append(np.abs(emp - exact).max())
        assert gaps[1] < gaps[0]
        assert gaps[1] < 2 / np.sqrt(100_000) * 3

    def test_covariates_independent_of_types(self, small_menu):
        prim, m = small_menu
        n = 40_000
        ds = sample_market(m, prim, n, seed=4, covariate_law=CovariateLaw("directions"))
        c = np.corrcoef(np.c_[ds.X1, ds.truth["theta"]].T)[:2, 2:]
        assert np.abs(c).max() < 4 / np.sqrt(n)

    def test_records_immutable(self, small_menu):
        prim, m = small_menu
        ds = sample_market(m, prim, 10, seed=0)
        with pytest.raises(ValueError):
            ds.q[0, 0] = 1.0

    def test_bad_n(self, small_menu):
        prim, m = small_menu
        with pytest.raises(ValueError):
            sample_market(m, prim, 0, seed=0)

    def test_dimension_mismatch(self, small_menu):
        _, m = small_menu
        from screenlab.grids import DensityGrid
        from screenlab.model import CostSpec, Primitives

        p3 = Primitives(DensityGrid.uniform(((0, 1),) * 3, 5), CostSpec.quadratic(1.0, dim=3))
        with pytest.raises(ValueError, match="dimension"):
            sample_market(m, p3, 10, seed=0)


class TestNoise:
    def test_zero_noise_is_identity(self, small_menu):
        prim, m = small_menu
        ds = sample_market(m, prim, 100, seed=0)
        assert apply_price_noise(ds, NoiseSpec(0.0), seed=1) is ds

    def test_noise_mean_zero(self, small_menu):
        prim, m = small_menu
        n, s = 100_000, 0.01
        ds = sample_market(m, prim, n, seed=0)
        noisy = apply_price_noise(ds, NoiseSpec(s), seed=1)
        np.testing.assert_array_equal(noisy.q, ds.q)
        assert abs(np.mean(noisy.p - ds.p)) <= 3 * s / np.sqrt(n)

    def test_negative_scale(self):
        with pytest.raises(ValueError):
            NoiseSpec(sigma_eps=-0.1)

    def test_log_mean_constraint(self):
        with pytest.raises(ValueError, match="log Y"):
            NoiseSpec(shifter="lognormal", shifter_sd=0.2, log_mean=0.1)
        assert NoiseSpec(shifter="lognormal", shifter_sd=0.2).log_mean == 0.0


class TestTasteShifter:
    def test_degenerate_unchanged(self):
        prim, Y = apply_taste_shifter(PRIM, NoiseSpec(), seed=3)
        assert Y == 1.0 and prim is PRIM

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_types_scale_by_drawn_shifter(self, seed):
        shifted, Y = apply_taste_shifter(PRIM, NoiseSpec(shifter="lognormal", shifter_sd=0.2), seed)
        a = PRIM.density.sample(200, np.random.default_rng(seed))
        b = shifted.density.sample(200, np.random.default_rng(seed))
        np.testing.assert_allclose(b, Y * a, rtol=1e-9)

    def test_market_structure(self):
        P, Y = sample_shifted_markets(lambda n, r: r.uniform(0, 1, (n, 2)), 500, 3,
                                      NoiseSpec(shifter="lognormal", shifter_sd=0.2), seed=0)
        assert P.shape == (500, 3, 2) and Y.shape == (500,)
        assert abs(np.log(Y).mean()) < 4 * 0.2 / np.sqrt(500)


class TestSeparableGenerator:
    def test_common_types_across_regimes(self):
        ds = SeparableGenerator(omega=(0.5, 0.7)).sample(500, seed=2)
        t1, t2 = ds.regime(1).truth["theta"], ds.regime(2).truth["theta"]
        np.testing.assert_array_equal(t1, t2)

    def test_price_gradients_cross_at_q_hat(self):
        g = SeparableGenerator(omega=(0.5, 0.7))
        np.testing.assert_allclose(g.price_grad(g.q_hat, 1), g.price_grad(g.q_hat, 2), rtol=1e-12)

    def test_first_order_condition(self):
        g = SeparableGenerator(omega=(0.5, 0.7))
        th = np.random.default_rng(0).uniform(g.lo, 1, (100, 2))
        for r in (1, 2):
            q = g.rho(th, r)
            np.testing.assert_allclose(g.theta_of_q(q, r), th, rtol=1e-9)


def test_dataset_rejects_unknown_regime():
    with pytest.raises(ValueError, match="regime"):
        Dataset(np.zeros((2, 2)), np.zeros(2), z=[1, 3])
