"""Identification under linear utility.

On the perfectly screened part of the choice set the price gradient equals
the type, so pseudo-types come straight from the fitted price surface.  Their
distribution estimates the high-type density, and the interior optimality
equation, rewritten in choice coordinates, is an elliptic equation for the
cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from .pde import PDEResult, SingularWeightError, boundary_nodes, polynomial_basis, solve_divergence_pde
from .pricefit import PriceField
from .simulate import Dataset


class TooFewRecordsError(ValueError):
    pass


@dataclass
class PseudoTypeField:
    """Pseudo-types on the price-field lattice and per record.

    Attributes
    ----------
    axes : tuple of arrays
        Lattice of the price field.
    mask : bool array
        Lattice nodes in the screened region.
    theta_mesh : array (n1, n2, J)
        Pseudo-type at each lattice node (NaN outside ``mask``).
    jac_mesh : array (n1, n2, J, J)
        Jacobian of the pseudo-type map at each lattice node.
    theta : array (n, J)
        Per-record pseudo-types, NaN for records left unattached.
    attached : bool array (n,)
    n_outside : int
        Screened records left unattached.
    dv_mesh : array (n1, n2, J)
        Marginal utility on the lattice (ones under linear utility).
    """

    axes: tuple
    mask: np.ndarray
    theta_mesh: np.ndarray
    jac_mesh: np.ndarray
    theta: np.ndarray
    attached: np.ndarray
    n_outside: int = 0
    dv_mesh: np.ndarray | None = None

    @property
    def points(self) -> np.ndarray:
        return self.theta[self.attached]

    def mesh_points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)


def mesh_lookup(axes, mask, pts) -> np.ndarray:
    """Whether the nearest lattice node of each point lies in ``mask``."""
    pts = np.atleast_2d(pts)
    idx = []
    for j, a in enumerate(axes):
        h = a[1] - a[0]
        k = np.rint((pts[:, j] - a[0]) / h).astype(int)
        idx.append(k)
    idx = np.stack(idx, axis=1)
    ok = np.all((idx >= 0) & (idx < np.array(mask.shape)), axis=1)
    out = np.zeros(len(pts), dtype=bool)
    out[ok] = mask[tuple(idx[ok].T)]
    return out


def recover_types_linear(pf: PriceField, ds: Dataset, hess_tol: float = 1e-6) -> PseudoTypeField:
    """Pseudo-types ``theta = grad P(q)`` on the screened region.

    Records enter only if they were used to fit the price surface (screened,
    full-dimensional neighbourhood), lie inside the hull of the screened
    choices and the local fit at their choice is convex.
    """
    if pf.mask is None or not pf.mask.any():
        raise ValueError("price field has an empty screened mask")
    used = pf.record_mask if pf.record_mask is not None else np.ones(ds.n, dtype=bool)
    cand = used & pf.in_support(ds.q, min_count=1)
    theta = np.full((ds.n, ds.dim), np.nan)
    attached = np.zeros(ds.n, dtype=bool)
    if cand.any():
        _, g, H = pf.local_fit(ds.q[cand])
        lam = np.linalg.eigvalsh(np.nan_to_num(H))
        hscale = max(np.nanmax(np.abs(lam)), 1e-300)
        good = np.all(np.isfinite(g), axis=1) & (lam[:, 0] >= -hess_tol * hscale)
        idx = np.nonzero(cand)[0][good]
        theta[idx] = g[good]
        attached[idx] = True
    theta_mesh = np.where(pf.mask[..., None], pf.mesh_grad, np.nan)
    jac = np.where(pf.mask[..., None, None], pf.mesh_hess, np.nan)
    return PseudoTypeField(pf.mesh_axes, pf.mask.copy(), theta_mesh, jac, theta, attached,
                           int(np.sum(used & ~attached)), np.ones_like(theta_mesh))


# ---------------------------------------------------------------------------
# density of high types
# ---------------------------------------------------------------------------
@dataclass
class HighTypeDensity:
    """Histogram-based density estimate of the screened types.

    ``values`` is piecewise constant on the cells with edges ``edges``.
    """

    edges: tuple
    values: np.ndarray
    support: np.ndarray
    n: int
    cdf_gap: float = np.nan
    meta: dict = field(default_factory=dict)

    @property
    def centers(self):
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.edges)

    @property
    def cell_area(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def pdf(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        idx = []
        ok = np.ones(len(pts), dtype=bool)
        for j, e in enumerate(self.edges):
            k = np.searchsorted(e, pts[:, j], side="right") - 1
            ok &= (k >= 0) & (k < len(e) - 1)
            idx.append(np.clip(k, 0, len(e) - 2))
        out = self.values[tuple(idx)]
        return np.where(ok, out, 0.0)

    def smooth_pdf(self, pts) -> np.ndarray:
        """Multilinear interpolation between cell centres, zero off the support."""
        rgi = RegularGridInterpolator(self.centers, self.values, bounds_error=False, fill_value=None)
        val = np.maximum(rgi(np.atleast_2d(pts)), 0.0)
        return np.where(self.pdf(pts) > 0, val, self.pdf(pts))

    def cdf(self, xi) -> np.ndarray:
        """CDF by quadrature of the piecewise constant density (exact within cells)."""
        xi = np.atleast_2d(xi)
        out = np.zeros(len(xi))
        w = [np.diff(e) for e in self.edges]
        for n, x in enumerate(xi):
            frac = [np.clip((x[j] - e[:-1]) / w[j], 0.0, 1.0) * w[j] for j, e in enumerate(self.edges)]
            out[n] = np.einsum("ij,i,j->", self.values, frac[0], frac[1]) if len(frac) == 2 else \
                float(np.sum(self.values * frac[0]))
        return out


def estimate_density_high(ptf: PseudoTypeField, bins: int = 100, bounds=None, smooth: float = 4.0,
                          min_records: int = 200, n_check: int = 400, seed: int = 0) -> HighTypeDensity:
    """Density of high types from the attached pseudo-types.

    A histogram on ``bins`` cells per axis is smoothed by normalized
    convolution with a Gaussian of ``smooth`` cells, so the estimate does not
    leak mass across the edge of its support.  The CDF identity is checked
    against the direct empirical CDF of the pseudo-types on ``n_check``
    random probes and the sup gap stored in ``cdf_gap``.

    Raises
    ------
    TooFewRecordsError
        Fewer than ``min_records`` attached pseudo-types.
    """
    pts = ptf.points
    if len(pts) < min_records:
        raise TooFewRecordsError(f"{len(pts)} attached pseudo-types, need {min_records}")
    J = pts.shape[1]
    if bounds is None:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 1e-9 * (hi - lo + 1)
        bounds = np.stack([lo - pad, hi + pad], axis=1)
    bounds = np.asarray(bounds, dtype=float)
    edges = tuple(np.linspace(bounds[j, 0], bounds[j, 1], bins + 1) for j in range(J))
    counts, _ = np.histogramdd(pts, bins=edges)
    support = ndimage.binary_fill_holes(ndimage.binary_closing(counts > 0, iterations=1))
    support |= counts > 0
    if smooth > 0:
        num = ndimage.gaussian_filter(counts * support, smooth, mode="constant")
        den = ndimage.gaussian_filter(support.astype(float), smooth, mode="constant")
        with np.errstate(invalid="ignore", divide="ignore"):
            dens = np.where(support, num / den, 0.0)
    else:
        dens = counts.astype(float)
    area = float(np.prod([e[1] - e[0] for e in edges]))
    dens = dens / (dens.sum() * area)
    est = HighTypeDensity(edges, dens, support, len(pts))
    rng = np.random.default_rng(seed)
    probes = pts[rng.choice(len(pts), size=min(n_check, len(pts)), replace=False)]
    emp = np.array([np.mean(np.all(pts <= x, axis=1)) for x in probes])
    est.cdf_gap = float(np.max(np.abs(est.cdf(probes) - emp)))
    return est


def empirical_cdf_identity(ptf: PseudoTypeField, xi) -> np.ndarray:
    """Share of screened choices whose pseudo-type lies below ``xi``.

    This is the choice distribution evaluated on the preimage of the orthant
    below ``xi`` under the gradient map.
    """
    pts = ptf.points
    return np.array([np.mean(np.all(pts <= x, axis=1)) for x in np.atleast_2d(xi)])


# ---------------------------------------------------------------------------
# cost recovery
# ---------------------------------------------------------------------------
@dataclass
class CostEstimate:
    axes: tuple
    mask: np.ndarray
    C: np.ndarray
    grad: np.ndarray
    pde: PDEResult
    K: np.ndarray
    m: np.ndarray
    gradP: np.ndarray
    info: dict = field(default_factory=dict)

    def mesh_points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def interior(self, margin: int = 3) -> np.ndarray:
        return interior_mask(self.mask, margin)


def interior_mask(mask: np.ndarray, margin: int) -> np.ndarray:
    if margin <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, iterations=margin, border_value=0)


def weighting_fields(ptf: PseudoTypeField, density: HighTypeDensity):
    """Tensor weight, source density and determinant on the lattice.

    With ``M`` the Jacobian of the pseudo-type map and ``v'`` the marginal
    utility, the source is ``m = f(theta) det M`` and the tensor is
    ``K = f(theta) adj(M) diag(1/v')``.
    """
    M = ptf.jac_mesh
    th = ptf.theta_mesh
    mask = ptf.mask
    f = np.zeros(mask.shape)
    f[mask] = density.smooth_pdf(th[mask])
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    adj = np.empty_like(M)
    adj[..., 0, 0] = M[..., 1, 1]
    adj[..., 1, 1] = M[..., 0, 0]
    adj[..., 0, 1] = -M[..., 0, 1]
    adj[..., 1, 0] = -M[..., 1, 0]
    dv = ptf.dv_mesh if ptf.dv_mesh is not None else np.ones_like(th)
    # not symmetric in general once utility is nonlinear; the assembly handles that
    K = f[..., None, None] * adj / dv[..., None, :]
    m = f * det
    K = np.where(mask[..., None, None], np.nan_to_num(K), 0.0)
    m = np.where(mask, np.nan_to_num(m), 0.0)
    return K, m, np.where(mask, det, np.nan)


def nearest_node(axes, mask, point) -> tuple:
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    d = np.where(mask, np.linalg.norm(X - np.asarray(point, dtype=float), axis=-1), np.inf)
    return np.unravel_index(int(np.argmin(d)), mask.shape)


def recover_cost_pde(ptf: PseudoTypeField, pf: PriceField, density: HighTypeDensity, q0=None,
                     closure: str = "point", q_ref=None, C_ref: float = 0.0, inner_faces=None,
                     degree: int = 4, det_tol: float = 1e-10) -> CostEstimate:
    """Recover the cost on the screened region from the optimality equation.

    Parameters
    ----------
    ptf : PseudoTypeField
    pf : PriceField
        Supplies the price gradient on the lattice.
    density : HighTypeDensity
    q0 : array, optional
        Outside option.  With ``closure="point"`` the outflow node is the
        mask node nearest ``q0``.
    closure : {"point", "polynomial"}
        Treatment of the inner boundary, see :mod:`screenlab.pde`.
    q_ref, C_ref :
        Normalization ``C(q_ref) = C_ref``.  ``q_ref`` defaults to ``q0``
        when given, else to the first mask node.
    inner_faces : sequence of (axis, side) pairs, optional
        For ``closure="polynomial"``: lattice faces whose boundary equations
        are dropped, e.g. ``[(0, "lo"), (1, "lo")]``.  By default every
        boundary node's equation is dropped.
    degree : int
        Polynomial degree for ``closure="polynomial"``.

    Raises
    ------
    SingularWeightError
        The Jacobian determinant falls below ``det_tol`` on the mask.
    """
    axes, mask = ptf.axes, ptf.mask
    K, m, det = weighting_fields(ptf, density)
    gradP = np.where(mask[..., None], np.nan_to_num(pf.mesh_grad), 0.0)
    if q_ref is None and q0 is not None:
        q_ref = q0
    anchor = nearest_node(axes, mask, q_ref) if q_ref is not None else None
    kw = dict(anchor=anchor, anchor_value=C_ref, det=np.nan_to_num(det), det_tol=det_tol)
    if closure == "point":
        if q0 is None:
            raise ValueError("point closure needs the outside option")
        res = solve_divergence_pde(axes, mask, K, gradP, m, inner="point",
                                   source=nearest_node(axes, mask, q0), **kw)
    elif closure == "polynomial":
        inner = inner_face_nodes(mask, inner_faces)
        res = solve_divergence_pde(axes, mask, K, gradP, m, inner="polynomial", inner_nodes=inner,
                                   degree=degree, **kw)
        # the sieve gives an exact gradient; use it instead of the P1 average
        X = ptf.mesh_points().reshape(-1, 2)
        B, dB = polynomial_basis(X[mask.reshape(-1)], degree)
        g = np.full(mask.shape + (2,), np.nan)
        g[mask] = np.einsum("nkj,k->nj", dB[:, 1:], res.info["coef"])
        res.grad = g
    else:
        raise ValueError(f"unknown closure {closure!r}")
    return CostEstimate(axes, mask, res.C, res.grad, res, K, m, gradP,
                        {"closure": closure, "anchor": anchor, "C_ref": C_ref})


def inner_face_nodes(mask: np.ndarray, faces=None) -> np.ndarray:
    """Boundary nodes on the listed lattice faces, or all boundary nodes."""
    bnd = boundary_nodes(mask)
    if faces is None:
        return bnd
    out = np.zeros_like(mask)
    for axis, side in faces:
        # first (or last) mask node along every lattice line in the axis direction
        moved = np.moveaxis(mask, axis, 0)
        sel = np.zeros_like(moved)
        any_ = moved.any(axis=0)
        if side == "lo":
            k = np.argmax(moved, axis=0)
        else:
            k = moved.shape[0] - 1 - np.argmax(moved[::-1], axis=0)
        cols = np.nonzero(any_)
        sel[(k[cols],) + cols] = True
        out |= np.moveaxis(sel, 0, axis)
    return out & mask


# ---------------------------------------------------------------------------
# analytic extension
# ---------------------------------------------------------------------------
@dataclass
class ExtendedCost:
    degree: int
    coef: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    fit_error: float
    reliable: bool

    def value(self, q) -> np.ndarray:
        B, _ = polynomial_basis(np.atleast_2d(q), self.degree, self.center, self.scale)
        return B @ self.coef

    def grad(self, q) -> np.ndarray:
        _, dB = polynomial_basis(np.atleast_2d(q), self.degree, self.center, self.scale)
        return np.einsum("nkj,k->nj", dB, self.coef)


def extend_analytic(points, values, degree: int = 4, threshold: float = 1e-2) -> ExtendedCost:
    """Least-squares polynomial fit of cost values, evaluable off the fitting region.

    ``fit_error`` is the in-sample RMS residual relative to the RMS spread
    of the values; above ``threshold`` the extension is flagged unreliable.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.asarray(values, dtype=float).ravel()
    ok = np.isfinite(vals) & np.all(np.isfinite(pts), axis=1)
    pts, vals = pts[ok], vals[ok]
    center, scale = pts.mean(axis=0), pts.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    B, _ = polynomial_basis(pts, degree, center, scale)
    if len(vals) < B.shape[1]:
        raise ValueError("fewer points than polynomial coefficients")
    coef = np.linalg.lstsq(B, vals, rcond=None)[0]
    spread = np.sqrt(np.mean((vals - vals.mean()) ** 2))
    err = float(np.sqrt(np.mean((B @ coef - vals) ** 2)) / max(spread, 1e-300))
    return ExtendedCost(degree, coef, center, scale, err, err <= threshold)


def extend_cost_estimate(est: CostEstimate, degree: int = 4, threshold: float = 1e-2) -> ExtendedCost:
    X = est.mesh_points()[est.mask]
    return extend_analytic(X, est.C[est.mask], degree, threshold)


# ---------------------------------------------------------------------------
# demand-only bias
# ---------------------------------------------------------------------------
@dataclass
class DemandOnlyReport:
    true_atoms: dict
    recovered_atoms: dict
    misreported: bool


def demand_only_bias(types, masses, choices, price_grad) -> DemandOnlyReport:
    """Pseudo-type atoms from choices alone versus the true type atoms.

    Each distinct choice is assigned the single pseudo-type ``price_grad(q)``
    and the pooled mass of everyone choosing it.  When several types share a
    choice, the recovered atom carries their joint mass at a point that is
    not any of their types.
    """
    types = np.atleast_2d(np.asarray(types, dtype=float))
    masses = np.asarray(masses, dtype=float)
    choices = np.atleast_2d(np.asarray(choices, dtype=float))
    true = {tuple(np.round(t, 12)): float(w) for t, w in zip(types, masses)}
    rec: dict = {}
    for q, w in zip(choices, masses):
        key = tuple(np.round(np.asarray(price_grad(q), dtype=float), 12))
        rec[key] = rec.get(key, 0.0) + float(w)
    mis = any(abs(rec.get(k, 0.0) - w) > 1e-12 for k, w in true.items()) or set(rec) != set(true)
    return DemandOnlyReport(true, rec, mis)


__all__ = [
    "PseudoTypeField", "recover_types_linear", "HighTypeDensity", "estimate_density_high",
    "empirical_cdf_identity", "CostEstimate", "recover_cost_pde", "extend_analytic",
    "extend_cost_estimate", "demand_only_bias", "DemandOnlyReport", "SingularWeightError",
    "TooFewRecordsError", "interior_mask", "mesh_lookup",
]
