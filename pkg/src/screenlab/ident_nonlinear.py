"""Identification with nonlinear utility from two cost regimes.

The same types face two price schedules.  At a common choice the ratio of
the two price gradients is the ratio of the two types choosing it, and the
spatial-quantile match tells which regime-2 choice belongs to the type
behind a regime-1 choice.  Chaining both towards the choice where the two
gradients coincide recovers regime-1 types up to a componentwise
normalization, then marginal utility, the type density and each regime's
cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .ident_linear import (CostEstimate, HighTypeDensity, PseudoTypeField, estimate_density_high,
                           recover_cost_pde)
from .pricefit import PriceField
from .quantiles import QuantileMatch, quantile_match
from .simulate import Dataset


class SingularRatioError(ValueError):
    def __init__(self, msg, where):
        super().__init__(msg)
        self.where = where


class FixedPointError(ValueError):
    """The two gradient fields do not cross on the common support."""


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


class LeftSupportError(RuntimeError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


def mesh_interpolator(axes, field_values):
    """Linear interpolation of a lattice field; NaN outside the lattice."""
    return RegularGridInterpolator(tuple(axes), field_values, bounds_error=False, fill_value=np.nan)


@dataclass
class RegimePair:
    """Two price fields fitted on the same population, plus the quantile match.

    Parameters
    ----------
    grad1, grad2 : callables
        Price gradients of regimes 1 and 2, ``(m, J) -> (m, J)``.
    q1, q2 : arrays
        Screened choices of each regime.
    axes : tuple of arrays
        Lattice on which the fixed point is searched and the match tabulated
        (the regime-1 lattice).
    mask : bool array
        Lattice nodes where both gradient fields are available.
    match12, match21 : QuantileMatch
    mask1 : bool array, optional
        Regime-1 screened nodes (starting points of the type recovery);
        defaults to ``mask``.
    """

    grad1: callable
    grad2: callable
    q1: np.ndarray
    q2: np.ndarray
    axes: tuple
    mask: np.ndarray
    match12: QuantileMatch
    match21: QuantileMatch
    hess1: callable = None
    hess2: callable = None
    info: dict = field(default_factory=dict)
    mask1: np.ndarray | None = None

    @property
    def start_mask(self) -> np.ndarray:
        return self.mask if self.mask1 is None else self.mask1

    def grad(self, regime: int):
        return self.grad1 if regime == 1 else self.grad2

    def mesh_points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)


def _field_evaluators(pf: PriceField):
    def grad(q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        out = np.full(q.shape, np.nan)
        ok = pf.in_support(q, min_count=1)
        if ok.any():
            out[ok] = pf.local_fit(q[ok])[1]
        return out

    def hess(q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        out = np.full(q.shape + (q.shape[1],), np.nan)
        ok = pf.in_support(q, min_count=1)
        if ok.any():
            out[ok] = pf.local_fit(q[ok])[2]
        return out

    return grad, hess


def regime_pair(pf1: PriceField, pf2: PriceField, ds1: Dataset | None = None, ds2: Dataset | None = None,
                max_points: int | None = 20000, tabulate: bool = True, seed: int = 0) -> RegimePair:
    """Assemble a :class:`RegimePair` from two fitted price fields.

    The match uses the screened choices of each regime (the records each
    field was fitted on).  Gradients and Hessians come from local fits at
    the requested points, NaN outside the hull of that regime's choices;
    the search lattice is regime 1's, restricted to nodes inside regime 2's
    screened lattice mask.
    """
    g1, h1 = _field_evaluators(pf1)
    g2, h2 = _field_evaluators(pf2)
    q1 = pf1.q
    q2 = pf2.q
    X = np.stack(np.meshgrid(*pf1.mesh_axes, indexing="ij"), axis=-1)
    on2 = mesh_interpolator(pf2.mesh_axes, pf2.mask.astype(float))(X.reshape(-1, X.shape[-1]))
    both = pf1.mask & (on2.reshape(pf1.mask.shape) == 1.0)
    m12 = quantile_match(q1, q2, max_points=max_points, seed=seed)
    m21 = quantile_match(q2, q1, max_points=max_points, seed=seed)
    if tabulate:
        m12.tabulate(pf1.mesh_axes, pf1.mask)
        m21.tabulate(pf2.mesh_axes, pf2.mask)
    return RegimePair(g1, g2, q1, q2, tuple(pf1.mesh_axes), both, m12, m21, h1, h2,
                      {"common_nodes": int(both.sum())}, pf1.mask.copy())


def gradient_ratio(rp: RegimePair, theta, q, frm: int = 2, to: int = 1, tol: float = 1e-10) -> np.ndarray:
    """Type at ``q`` in regime ``to`` given the type ``theta`` choosing ``q`` in regime ``frm``.

    Computes ``grad P_to(q) * theta / grad P_frm(q)`` componentwise.

    Raises
    ------
    SingularRatioError
        A denominator component is below ``tol`` in absolute value.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    theta = np.broadcast_to(np.asarray(theta, dtype=float), q.shape)
    num = rp.grad(to)(q)
    den = rp.grad(frm)(q)
    bad = ~(np.abs(den) > tol)
    if np.any(bad):
        raise SingularRatioError("vanishing price gradient component", q[np.any(bad, axis=1)])
    return num * theta / den


@dataclass
class FixedPoint:
    q_hat: np.ndarray
    gap: float
    node: tuple
    attractive: bool
    sign_constant: bool
    signs: np.ndarray


def find_fixed_point(rp: RegimePair, tol: float = 1e-2, refine: bool = True, n_probes: int = 24,
                     probe_radius: int = 4) -> FixedPoint:
    """Choice where the two price gradients coincide.

    The lattice node minimizing ``|grad P_1 - grad P_2|`` (relative to the
    typical gradient size) is accepted when that minimum is below ``tol``;
    with ``refine`` one Newton step on the gradient difference moves it off
    the lattice if the step stays within the cell.  The attractiveness sign
    ``sgn[(s_j(q) - q_j)(q_j - q_hat_j)]`` of the regime-1-to-2 match is
    evaluated on probes around the point and reported.

    Raises
    ------
    FixedPointError
        No node comes within ``tol``.
    """
    X = rp.mesh_points()
    J = X.shape[-1]
    pts = X[rp.mask]
    g1, g2 = rp.grad1(pts), rp.grad2(pts)
    scale = float(np.nanmedian(np.linalg.norm(g1, axis=1)))
    gap = np.linalg.norm(g1 - g2, axis=1) / scale
    k = int(np.nanargmin(gap))
    if not gap[k] < tol:
        raise FixedPointError(f"price gradients never cross: smallest relative gap {gap[k]:.3g} exceeds {tol:g}")
    q_hat = pts[k].copy()
    h = np.array([a[1] - a[0] for a in rp.axes])
    if refine and rp.hess1 is not None:
        Hd = (rp.hess1(q_hat[None]) - rp.hess2(q_hat[None]))[0]
        if np.all(np.isfinite(Hd)):
            try:
                step = np.linalg.solve(Hd, (g1[k] - g2[k]))
                if np.all(np.abs(step) <= h):
                    q_hat = q_hat - step
            except np.linalg.LinAlgError:
                pass
    node = tuple(np.argwhere(rp.mask)[k])
    # attractiveness probes on a ring of nodes around the crossing
    ang = np.linspace(0, 2 * np.pi, n_probes, endpoint=False)
    ring = q_hat + probe_radius * h * np.stack([np.cos(ang), np.sin(ang)], axis=1) if J == 2 else \
        q_hat + probe_radius * h * np.array([[1.0], [-1.0]])
    signs = np.zeros((0, J))
    try:
        s = rp.match12(ring)
        ok = np.all(np.isfinite(s), axis=1)
        prod = (s[ok] - ring[ok]) * (ring[ok] - q_hat)
        signs = np.sign(prod)
    except ValueError:
        ok = np.zeros(len(ring), dtype=bool)
    nz = signs[np.all(signs != 0, axis=1)] if len(signs) else signs
    constant = bool(len(nz) > 0 and np.all(nz == nz.flat[0]))
    attractive = constant and nz.flat[0] < 0
    return FixedPoint(q_hat, float(gap[k]), node, attractive, constant, signs)


@dataclass
class TypeRecovery:
    """Recovered regime-1 types for a batch of starting choices."""

    q_start: np.ndarray
    theta: np.ndarray
    steps: np.ndarray
    branch: np.ndarray            # +1 / -1 / 0 per coordinate: side of q_hat at the start
    trajectories: list | None = None


def iterate_type_recovery(rp: RegimePair, q_start, q_hat, theta0, tol: float | None = None,
                          max_iter: int = 200, keep_trajectories: bool = False,
                          step_tol: float | None = None) -> TypeRecovery:
    """Regime-1 types at ``q_start`` by chaining the match towards the fixed point.

    Each step sends the current choice to the regime-2 choice of the same
    type and multiplies the accumulated ratio by ``grad P_2 / grad P_1`` at
    the new choice; once within ``tol`` of ``q_hat`` the product is applied
    to the anchor ``theta0`` (the normalized regime-1 type at ``q_hat``).

    Parameters
    ----------
    tol : float, optional
        Stopping distance, default half the smallest lattice spacing.
    step_tol : float, optional
        Once within ``tol`` of ``q_hat``, keep iterating until a step is
        shorter than this (default ``tol / 100``).  The estimated match has
        its own fixed point near ``q_hat``, and running into it removes the
        truncation error of stopping at distance ``tol``.  Pass ``np.inf``
        to stop at the first iterate within ``tol``.

    Raises
    ------
    NonConvergenceError
        Some start is still farther than ``tol`` after ``max_iter`` steps.
    LeftSupportError
        An iterate left the region where both fields and the match exist.
    """
    q = np.atleast_2d(np.asarray(q_start, dtype=float)).copy()
    q_hat = np.asarray(q_hat, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    if tol is None:
        tol = 0.5 * min(a[1] - a[0] for a in rp.axes)
    if step_tol is None:
        step_tol = tol / 100
    n, J = q.shape
    prod = np.ones((n, J))
    steps = np.zeros(n, dtype=int)
    branch = np.sign(q - q_hat).astype(int)
    traj = [[qi.copy()] for qi in q] if keep_trajectories else None
    active = np.linalg.norm(q - q_hat, axis=1) >= tol
    for _ in range(max_iter):
        if not active.any():
            break
        ia = np.nonzero(active)[0]
        try:
            nxt = rp.match12(q[ia])
        except ValueError as exc:
            raise LeftSupportError(f"iterate left the matched support: {exc}",
                                   traj if traj is not None else q[ia]) from exc
        prev = q[ia].copy()
        ratio = rp.grad2(nxt) / rp.grad1(nxt)
        if not np.all(np.isfinite(ratio)):
            bad = ia[~np.all(np.isfinite(ratio), axis=1)]
            raise LeftSupportError(f"{len(bad)} iterates left the common gradient support", q[bad])
        q[ia] = nxt
        prod[ia] *= ratio
        steps[ia] += 1
        if traj is not None:
            for i in ia:
                traj[i].append(q[i].copy())
        step = np.linalg.norm(nxt - prev, axis=1)
        active[ia] = (np.linalg.norm(nxt - q_hat, axis=1) >= tol) | (step >= step_tol)
    if active.any():
        raise NonConvergenceError(f"{int(active.sum())} starts did not reach the fixed point in {max_iter} steps",
                                  traj if traj is not None else q[active])
    return TypeRecovery(np.atleast_2d(np.asarray(q_start, dtype=float)), theta0 * prod, steps, branch,
                        [np.array(t) for t in traj] if traj is not None else None)


@dataclass
class NonlinearTypeField:
    """Regime-1 types and marginal utility on the regime-1 lattice."""

    axes: tuple
    mask: np.ndarray
    theta: np.ndarray           # (n1, n2, J), NaN off mask
    dv: np.ndarray              # recovered marginal utility, NaN off mask
    q_hat: np.ndarray
    theta0: np.ndarray
    steps: np.ndarray
    nonpositive: np.ndarray     # nodes where some recovered derivative is <= 0

    def mesh_points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)


def recover_type_field(rp: RegimePair, fp: FixedPoint, theta0, **kw) -> NonlinearTypeField:
    """Run :func:`iterate_type_recovery` from every regime-1 screened lattice node."""
    X = rp.mesh_points()
    mask = rp.start_mask
    tr = iterate_type_recovery(rp, X[mask], fp.q_hat, theta0, **kw)
    theta = np.full(X.shape, np.nan)
    theta[mask] = tr.theta
    steps = np.full(mask.shape, -1)
    steps[mask] = tr.steps
    dv = recover_marginal_utility(theta, rp.grad1(X.reshape(-1, X.shape[-1])).reshape(X.shape))
    nonpos = mask & ~np.all(dv > 0, axis=-1)
    return NonlinearTypeField(rp.axes, mask.copy(), theta, dv, fp.q_hat, np.asarray(theta0, float), steps, nonpos)


def recover_marginal_utility(theta, grad1) -> np.ndarray:
    """Marginal utility ``grad P_1 / theta_1`` componentwise (not projected onto positives)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.asarray(grad1) / np.asarray(theta)


def loglog_slopes(tf: NonlinearTypeField) -> np.ndarray:
    """Per-coordinate slope of ``log dv_j`` on ``log q_j`` over the recovered mask.

    Under power utility ``q_j ** w_j`` the slope is ``w_j - 1``.
    """
    X = tf.mesh_points()
    ok = tf.mask & np.all(tf.dv > 0, axis=-1) & np.all(X > 0, axis=-1)
    out = []
    for j in range(X.shape[-1]):
        x = np.log(X[..., j][ok])
        y = np.log(tf.dv[..., j][ok])
        out.append(np.polyfit(x, y, 1)[0])
    return np.array(out)


def rescale_anchor(tf: NonlinearTypeField, theta0_new) -> NonlinearTypeField:
    """Same recovery under a different anchor: types scale by ``theta0_new / theta0``, marginal utility inversely."""
    c = np.asarray(theta0_new, dtype=float) / tf.theta0
    return NonlinearTypeField(tf.axes, tf.mask, tf.theta * c, tf.dv / c, tf.q_hat, np.asarray(theta0_new, float),
                              tf.steps, tf.nonpositive)


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------
def _mesh_jacobian(axes, field_values) -> np.ndarray:
    """Finite-difference Jacobian ``d field_i / d q_j`` of a lattice field."""
    J = field_values.shape[-1]
    out = np.empty(field_values.shape + (J,))
    for i in range(J):
        grads = np.gradient(field_values[..., i], *axes, edge_order=2)
        for j in range(J):
            out[..., i, j] = grads[j]
    return out


def type_jacobian_identity(gradP, hessP, dv, d2v) -> np.ndarray:
    """Jacobian of ``q -> grad P(q) / v'(q)`` from the differentiated optimality condition.

    ``D theta = D grad P diag(1/v') - diag(grad P / v'^2) D v'``, with ``D v'``
    the Jacobian of the marginal utility.
    """
    inv = 1.0 / dv
    return hessP * inv[..., None, :] - (gradP * inv ** 2)[..., :, None] * d2v


@dataclass
class RegimeCost:
    regime: int
    cost: CostEstimate
    types: PseudoTypeField
    density: HighTypeDensity
    det_identity: np.ndarray
    det_direct: np.ndarray
    det_gap: float


def recover_cost_nonlinear(tf: NonlinearTypeField, pf: PriceField, ds: Dataset, regime: int,
                           inner_faces=((0, "lo"), (1, "lo")), degree: int = 4, q_ref=None, C_ref: float = 0.0,
                           density_kw: dict | None = None, det_margin: int = 2) -> RegimeCost:
    """Cost of one regime from the recovered marginal utility.

    Types in the regime are ``grad P / v'`` with ``v'`` interpolated from the
    recovered field; their Jacobian comes from the differentiated optimality
    condition, and its determinant is cross-checked against finite
    differences of the type field (``det_gap``: median relative gap over
    nodes at least ``det_margin`` from the mask edge).  The cost then solves
    the same divergence-form equation as under linear utility, with the
    polynomial closure on ``inner_faces``.
    """
    axes, mask = pf.mesh_axes, pf.mask
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    flat = X.reshape(-1, X.shape[-1])
    dv_i = mesh_interpolator(tf.axes, tf.dv)
    d2v_field = _mesh_jacobian(tf.axes, tf.dv)
    d2v_i = mesh_interpolator(tf.axes, d2v_field)
    dv = dv_i(flat).reshape(X.shape)
    d2v = d2v_i(flat).reshape(X.shape + (X.shape[-1],))
    ok = mask & np.all(np.isfinite(dv), axis=-1) & np.all(np.isfinite(d2v), axis=(-2, -1))
    gradP = np.where(ok[..., None], pf.mesh_grad, np.nan)
    theta = gradP / dv
    jac = type_jacobian_identity(gradP, pf.mesh_hess, dv, d2v)
    jac = np.where(ok[..., None, None], jac, np.nan)
    det_id = np.linalg.det(np.nan_to_num(jac))
    det_fd = np.linalg.det(np.nan_to_num(_mesh_jacobian(axes, theta)))
    from .ident_linear import interior_mask
    core = interior_mask(ok, det_margin)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(det_id - det_fd) / np.abs(det_fd)
    det_gap = float(np.nanmedian(rel[core])) if core.any() else np.nan
    # per-record types for the density
    _, g_rec, _ = pf.local_fit(ds.q)
    th_rec = g_rec / dv_i(ds.q)
    good = np.all(np.isfinite(th_rec), axis=1)
    ptf = PseudoTypeField(axes, ok, np.where(ok[..., None], theta, np.nan), jac, th_rec, good,
                          int(np.sum(~good)), np.where(ok[..., None], dv, np.nan))
    dens = estimate_density_high(ptf, **(density_kw or {}))
    est = recover_cost_pde(ptf, pf, dens, closure="polynomial", inner_faces=list(inner_faces), degree=degree,
                           q_ref=q_ref, C_ref=C_ref)
    return RegimeCost(regime, est, ptf, dens, np.where(ok, det_id, np.nan), np.where(ok, det_fd, np.nan), det_gap)
