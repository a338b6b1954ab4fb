import numpy as np
import pytest

from screenlab.ident_linear import (TooFewRecordsError, demand_only_bias, empirical_cdf_identity,
                                    estimate_density_high, extend_analytic, inner_face_nodes,
                                    recover_types_linear)
from screenlab.pde import pde_residual
from screenlab.pricefit import ShapeCheckError, fit_price_field
from screenlab.simulate import Dataset, NoiseSpec, SeparableGenerator, apply_price_noise


@pytest.fixture(scope="module")
def quad():
    rng = np.random.default_rng(0)
    q = rng.uniform(0.2, 1.0, (3000, 2))
    ds = Dataset(q, 0.5 * np.sum(q ** 2, axis=1))
    return ds, fit_price_field(ds, restrict=False, mesh=21)


class TestPriceField:
    def test_quadratic_gradient_exact(self, quad):
        _, pf = quad
        pr = np.random.default_rng(1).uniform(0.3, 0.9, (200, 2))
        np.testing.assert_allclose(pf.grad(pr), pr, atol=1e-6)

    def test_hessian_symmetric_psd(self, quad):
        _, pf = quad
        H = pf.mesh_hess[pf.mask]
        np.testing.assert_allclose(H, np.swapaxes(H, 1, 2), atol=1e-12)
        assert np.linalg.eigvalsh(H)[:, 0].min() > 0

    def test_concave_prices_fail_shape_check(self, quad):
        ds, _ = quad
        with pytest.raises(ShapeCheckError):
            fit_price_field(ds.with_prices(-ds.p), restrict=False, mesh=21, check=True)

    def test_noisy_prices_gradient_bound(self):
        rng = np.random.default_rng(0)
        n, sigma = 50_000, 0.01
        q = rng.uniform(0, 1, (n, 2))
        ds = apply_price_noise(Dataset(q, 0.5 * np.sum(q ** 2, axis=1)), NoiseSpec(sigma), seed=1)
        pf = fit_price_field(ds, restrict=False, mesh=21, adaptive_k=None)
        pr = rng.uniform(0.15, 0.85, (2000, 2))
        err = np.abs(pf.grad(pr) - pr).max()
        # local quadratic, Gaussian kernel, unit design density: gradient sd = sigma / (h^2 sqrt(8 pi n));
        # the quadratic truth has no smoothing bias
        bound = 5 * sigma / (pf.bandwidth ** 2 * np.sqrt(8 * np.pi * n))
        assert err <= bound


class TestPseudoTypes:
    def test_gradient_identity(self, quad):
        ds, pf = quad
        ptf = recover_types_linear(pf, ds)
        assert ptf.attached.mean() > 0.95
        np.testing.assert_allclose(ptf.points, ds.q[ptf.attached], atol=1e-9)

    def test_monotone_map(self, quad):
        ds, pf = quad
        ptf = recover_types_linear(pf, ds)
        rng = np.random.default_rng(2)
        i, j = rng.integers(0, len(ptf.points), (2, 2000))
        q, t = ds.q[ptf.attached], ptf.points
        assert np.all(np.sum((t[i] - t[j]) * (q[i] - q[j]), axis=1) >= -1e-12)

    def test_empty_mask_rejected(self, quad):
        ds, pf = quad
        import copy

        bad = copy.copy(pf)
        bad.mask = np.zeros_like(pf.mask)
        with pytest.raises(ValueError, match="empty"):
            recover_types_linear(bad, ds)

    def test_bunched_records_not_attached(self):
        # a one-dimensional segment of choices fails the local scatter test
        rng = np.random.default_rng(3)
        q2d = rng.uniform(0.5, 1.0, (2000, 2))
        s = rng.uniform(0.0, 0.4, 400)
        seg = np.c_[s, s]
        q = np.vstack([q2d, seg])
        ds = Dataset(q, 0.5 * np.sum(q ** 2, axis=1))
        pf = fit_price_field(ds, mesh=21)
        ptf = recover_types_linear(pf, ds)
        assert not ptf.attached[2000:].any()
        assert ptf.attached[:2000].mean() > 0.9


class TestDensity:
    def test_normalized(self, quad):
        ds, pf = quad
        d = estimate_density_high(recover_types_linear(pf, ds))
        assert d.values.sum() * d.cell_area == pytest.approx(1.0, abs=1e-6)
        assert np.all(d.values >= 0)

    def test_cdf_identity(self, quad):
        ds, pf = quad
        ptf = recover_types_linear(pf, ds)
        d = estimate_density_high(ptf)
        assert d.cdf_gap <= 0.02
        xi = np.random.default_rng(4).uniform(0.2, 1.0, (300, 2))
        assert np.abs(d.cdf(xi) - empirical_cdf_identity(ptf, xi)).max() <= 0.02

    def test_too_few_records(self, quad):
        ds, pf = quad
        with pytest.raises(TooFewRecordsError):
            estimate_density_high(recover_types_linear(pf, ds), min_records=10 ** 6)


class TestCostPDE:
    def test_truth_plugin_residual(self):
        # linear-utility separable generator: grad C = q, uniform types, known choice density
        g = SeparableGenerator(omega=(1.0, 1.0), c=1.0)
        lo, hi = g._qrange(1)
        n = 161
        ax = tuple(np.linspace(lo[j], hi[j], n) for j in range(2))
        Q = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
        M = g.dtheta_diag(Q, 1)
        f = 1 / (1 - g.lo) ** 2
        K = np.zeros(Q.shape + (2,))
        K[..., 0, 0] = f * M[..., 1]
        K[..., 1, 1] = f * M[..., 0]
        mask = np.ones((n, n), bool)
        inner = inner_face_nodes(mask, [(0, "lo"), (1, "lo")])
        res, bnd = pde_residual(ax, mask, K, g.price_grad(Q, 1), f * M.prod(-1), 0.5 * np.sum(Q ** 2, -1),
                                keep=mask & ~inner)
        assert res <= 1e-3 and bnd <= 1e-3


class TestExtension:
    def test_quadratic_reproduced(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(0.3, 1.0, (400, 2))
        C = 0.5 * np.sum(X ** 2, axis=1) + 0.1 * X[:, 0] * X[:, 1]
        ext = extend_analytic(X, C, degree=4)
        Y = rng.uniform(0.0, 0.3, (50, 2))
        np.testing.assert_allclose(ext.value(Y), 0.5 * np.sum(Y ** 2, 1) + 0.1 * Y[:, 0] * Y[:, 1], atol=1e-8)
        assert ext.reliable

    def test_misspecification_reported(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(0.0, 1.0, (400, 2))
        ext = extend_analytic(X, X[:, 0] ** 4 + X[:, 1] ** 4, degree=2)
        assert ext.fit_error > 0


class TestDemandOnlyBias:
    def test_bunched_atoms_misreported(self):
        types = [[0.6, 0.4], [0.4, 0.6], [0.9, 0.9]]
        masses = [0.3, 0.3, 0.4]
        choices = [[0.25, 0.25], [0.25, 0.25], [0.9, 0.9]]
        rep = demand_only_bias(types, masses, choices, lambda q: np.asarray(q) * 2 if q[0] < 0.5 else q)
        assert rep.misreported
        assert rep.recovered_atoms[(0.5, 0.5)] == pytest.approx(0.6)
        assert rep.true_atoms[(0.6, 0.4)] == pytest.approx(0.3)

    def test_perfect_screening_not_misreported(self):
        types = [[0.6, 0.4], [0.9, 0.9]]
        rep = demand_only_bias(types, [0.5, 0.5], types, lambda q: q)
        assert not rep.misreported
