import numpy as np
import pytest

from screenlab.ident_nonlinear import (FixedPointError, NonlinearTypeField, RegimePair, SingularRatioError,
                                       find_fixed_point, gradient_ratio, iterate_type_recovery, loglog_slopes,
                                       recover_marginal_utility, rescale_anchor, type_jacobian_identity)
from screenlab.simulate import SeparableGenerator

GEN = SeparableGenerator(omega=(0.5, 0.7))


def exact_pair(gen=GEN, m=41, grad2=None):
    """Regime pair built from the closed-form price gradients and match."""
    lo = gen.rho1(np.full(2, gen.lo))
    hi = gen.rho1(np.ones(2))
    axes = tuple(np.linspace(lo[j], hi[j], m) for j in range(2))

    def match12(q):
        return gen.rho2(gen.theta1(np.atleast_2d(q)))

    def match21(q):
        return gen.rho1(gen.theta_of_q(np.atleast_2d(q), 2))

    g2 = grad2 or (lambda q: gen.price_grad(np.atleast_2d(q), 2))
    return RegimePair(lambda q: gen.price_grad(np.atleast_2d(q), 1), g2, None, None, axes,
                      np.ones((m, m), dtype=bool), match12, match21)


def test_ratio_at_crossing_returns_type():
    rp = exact_pair()
    th = np.array([0.6, 0.8])
    assert np.allclose(gradient_ratio(rp, th, GEN.q_hat[None]), th, atol=1e-10)


def test_ratio_composition_is_identity():
    rp = exact_pair()
    q = GEN.rho1(np.array([[0.55, 0.9], [0.8, 0.5]]))
    th = np.array([[0.7, 0.6], [0.65, 0.95]])
    there = gradient_ratio(rp, th, q, frm=2, to=1)
    back = gradient_ratio(rp, there, q, frm=1, to=2)
    assert np.allclose(back, th, atol=1e-10)


def test_ratio_rejects_vanishing_gradient():
    rp = exact_pair(grad2=lambda q: np.c_[np.zeros(len(np.atleast_2d(q))), np.ones(len(np.atleast_2d(q)))])
    with pytest.raises(SingularRatioError):
        gradient_ratio(rp, [0.7, 0.7], GEN.q_hat[None])


def test_fixed_point_found_within_a_cell():
    rp = exact_pair()
    fp = find_fixed_point(rp)
    h = np.array([a[1] - a[0] for a in rp.axes])
    assert np.all(np.abs(fp.q_hat - GEN.q_hat) <= h)
    assert fp.attractive and fp.sign_constant


def test_parallel_fields_have_no_fixed_point():
    rp = exact_pair(grad2=lambda q: GEN.price_grad(np.atleast_2d(q), 1) + 0.5)
    with pytest.raises(FixedPointError):
        find_fixed_point(rp)


def test_start_at_crossing_takes_no_steps():
    rp = exact_pair()
    th0 = np.array(GEN.theta_hat)
    tr = iterate_type_recovery(rp, GEN.q_hat[None], GEN.q_hat, th0)
    assert tr.steps[0] == 0
    assert np.allclose(tr.theta[0], th0)


def test_exact_ingredients_recover_types():
    rp = exact_pair()
    u = np.linspace(0.5, 0.98, 7)
    TH = np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1).reshape(-1, 2)
    tr = iterate_type_recovery(rp, GEN.rho1(TH), GEN.q_hat, np.array(GEN.theta_hat))
    assert np.max(np.abs(tr.theta / TH - 1)) < 1e-3
    # starts on opposite sides of the crossing are reported as such
    assert set(np.unique(tr.branch[:, 0])) >= {-1, 1}


def _field(gen=GEN, m=21):
    lo, hi = gen.rho1(np.full(2, 0.5)), gen.rho1(np.ones(2))
    axes = tuple(np.linspace(lo[j], hi[j], m) for j in range(2))
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    theta = gen.theta1(X)
    dv = recover_marginal_utility(theta, gen.price_grad(X, 1))
    return NonlinearTypeField(axes, np.ones((m, m), dtype=bool), theta, dv, gen.q_hat,
                              np.array(gen.theta_hat), np.zeros((m, m), int), np.zeros((m, m), bool)), X


def test_marginal_utility_from_true_types():
    tf, X = _field()
    assert np.allclose(tf.dv, GEN.dv(X), rtol=1e-12)


def test_power_utility_log_slopes():
    tf, _ = _field()
    assert np.allclose(loglog_slopes(tf), GEN.om - 1, atol=1e-10)


def test_anchor_rescaling_is_multiplicative():
    tf, _ = _field()
    new = np.array([1.5, 0.5]) * tf.theta0
    tf2 = rescale_anchor(tf, new)
    assert np.allclose(tf2.theta / tf.theta, [1.5, 0.5])
    assert np.allclose(tf2.theta * tf2.dv, tf.theta * tf.dv)
    # the choice-to-type map is only identified up to this scale
    assert np.allclose(loglog_slopes(tf2), loglog_slopes(tf))


def test_type_jacobian_identity_matches_closed_form():
    q = GEN.rho1(np.array([[0.6, 0.7], [0.9, 0.55], [0.75, 0.95]]))
    for regime in (1, 2):
        gP = GEN.price_grad(q, regime)
        H = np.stack([np.diag(h) for h in GEN.price_hess_diag(q, regime)])
        d2v = np.stack([np.diag(h) for h in GEN.d2v(q)])
        Jm = type_jacobian_identity(gP, H, GEN.dv(q), d2v)
        truth = np.stack([np.diag(d) for d in GEN.dtheta_diag(q, regime)])
        assert np.allclose(Jm, truth, rtol=1e-10, atol=1e-12)
