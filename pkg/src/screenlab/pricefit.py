"""Local quadratic regression of prices on choices.

The fitted surface supplies price levels, gradients and Hessians at
arbitrary points; gradients are read off the local linear coefficients and
Hessians off the local quadratic ones.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .simulate import Dataset


class InsufficientSupportError(ValueError):
    pass


class ShapeCheckError(ValueError):
    """No part of the fitted price surface is increasing and convex."""


def _design(dq: np.ndarray) -> np.ndarray:
    """Quadratic design in local coordinates: 1, dq_j, dq_j dq_k / (1 + [j == k])."""
    m, J = dq.shape
    cols = [np.ones(m)] + [dq[:, j] for j in range(J)]
    for j in range(J):
        for k in range(j, J):
            cols.append(dq[:, j] * dq[:, k] * (0.5 if j == k else 1.0))
    return np.stack(cols, axis=1)


def local_scatter_ratio(q: np.ndarray, k: int = 15) -> np.ndarray:
    """Smallest over largest eigenvalue of the local covariance of each point's ``k`` nearest neighbours."""
    q = np.asarray(q, dtype=float)
    tree = cKDTree(q)
    k = min(k, len(q))
    _, nn = tree.query(q, k=k)
    pts = q[nn] - q[nn].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", pts, pts) / k
    ev = np.linalg.eigvalsh(cov)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = ev[:, 0] / ev[:, -1]
    return np.where(ev[:, -1] > 0, r, 0.0)


@dataclass
class PriceField:
    """Fitted price surface.

    Attributes
    ----------
    q, p : arrays
        Training choices and prices.
    bandwidth : float
        Gaussian kernel bandwidth.
    residual_scale : float
        Root mean squared in-sample residual.
    adaptive_k : int or None
        When set, the bandwidth at a point is capped at half the distance
        to its ``adaptive_k``-th nearest training choice.
    mesh_axes : tuple of arrays
        Evaluation lattice covering the training choices.
    mask : bool array
        Lattice nodes inside the screened region that pass the gradient and
        Hessian checks.
    widened : int
        Number of evaluations whose bandwidth had to be widened.
    """

    q: np.ndarray
    p: np.ndarray
    bandwidth: float
    residual_scale: float = np.nan
    mesh_axes: tuple = ()
    mask: np.ndarray | None = None
    inside: np.ndarray | None = None
    mesh_grad: np.ndarray | None = None
    mesh_hess: np.ndarray | None = None
    record_mask: np.ndarray | None = None
    widened: int = 0
    min_neighbors: int = 12
    adaptive_k: int | None = 100
    _tree: cKDTree | None = field(default=None, repr=False)
    _hull: Delaunay | None = field(default=None, repr=False)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self._tree = cKDTree(self.q)
        self._scale = np.std(self.q, axis=0).mean()

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    def local_fit(self, pts, exclude_self: bool = False, bandwidth: float | None = None):
        """Value, gradient and Hessian at ``pts`` from kernel-weighted quadratic fits."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        h0 = np.full(len(pts), self.bandwidth if bandwidth is None else bandwidth, dtype=float)
        if self.adaptive_k and len(self.q) > self.adaptive_k:
            # where choices pile up, shrink the window to half the k-th neighbour distance
            dk = self._tree.query(pts, k=self.adaptive_k + int(exclude_self))[0][:, -1]
            h0 = np.minimum(h0, 0.5 * dk)
        J = self.dim
        val = np.full(len(pts), np.nan)
        grad = np.full((len(pts), J), np.nan)
        hess = np.full((len(pts), J, J), np.nan)
        widened = 0
        iu = [(j, k) for j in range(J) for k in range(j, J)]
        for n, x in enumerate(pts):
            h = h0[n]
            for attempt in range(6):
                idx = np.asarray(self._tree.query_ball_point(x, 3 * h), dtype=int)
                if exclude_self and idx.size:
                    idx = idx[np.any(self.q[idx] != x, axis=1)]
                if idx.size >= self.min_neighbors:
                    dq = self.q[idx] - x
                    w = np.exp(-0.25 * np.sum(dq ** 2, axis=1) / h ** 2)
                    A = _design(dq / h) * w[:, None]
                    coef, _, _, sv = np.linalg.lstsq(A, self.p[idx] * w, rcond=None)
                    if sv[-1] > 1e-8 * sv[0]:
                        break
                h *= 1.5
                widened += 1 if attempt == 0 else 0
            else:
                continue
            val[n] = coef[0]
            grad[n] = coef[1:J + 1] / h
            H = np.zeros((J, J))
            for c, (j, k) in zip(coef[J + 1:], iu):
                H[j, k] = H[k, j] = c / h ** 2
            hess[n] = H
        self.widened += widened
        return val, grad, hess

    def value(self, pts):
        return self.local_fit(pts)[0]

    def grad(self, pts):
        return self.local_fit(pts)[1]

    def hess(self, pts):
        return self.local_fit(pts)[2]

    # region ---------------------------------------------------------------
    def in_support(self, pts, radius: float | None = None, min_count: int = 5) -> np.ndarray:
        """Inside the convex hull of the training choices and near enough to data."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self._hull is None:
            self._hull = Delaunay(self.q)
        ok = self._hull.find_simplex(pts) >= 0
        r = radius if radius is not None else 1.5 * self.bandwidth
        counts = np.array([len(c) for c in self._tree.query_ball_point(pts, r)])
        return ok & (counts >= min_count)

    def build_mesh(self, n: int = 41, grad_tol: float = 1e-8, hess_tol: float = 1e-6):
        """Evaluate on an ``n``-per-axis lattice over the data box and apply the gradient/Hessian checks."""
        lo, hi = self.q.min(axis=0), self.q.max(axis=0)
        axes = tuple(np.linspace(lo[j], hi[j], n) for j in range(self.dim))
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        inside = self.in_support(mesh)
        _, g, H = self.local_fit(mesh[inside])
        ok = np.zeros(len(mesh), dtype=bool)
        gscale = np.nanmax(np.linalg.norm(g, axis=1)) if inside.any() else 1.0
        lam = np.linalg.eigvalsh(np.nan_to_num(H))
        hscale = max(np.nanmax(np.abs(lam)), 1e-300) if inside.any() else 1.0
        good = (np.linalg.norm(g, axis=1) > grad_tol * gscale) & (lam[:, 0] >= -hess_tol * hscale) \
            & np.all(np.isfinite(g), axis=1)
        ok[np.nonzero(inside)[0][good]] = True
        shape = tuple(len(a) for a in axes)
        G = np.full((len(mesh), self.dim), np.nan)
        HH = np.full((len(mesh), self.dim, self.dim), np.nan)
        G[inside], HH[inside] = g, H
        self.mesh_axes = axes
        self.mesh_grad = G.reshape(shape + (self.dim,))
        self.mesh_hess = HH.reshape(shape + (self.dim, self.dim))
        self.mask = ok.reshape(shape)
        self.inside = inside.reshape(self.mask.shape)
        return self


def cv_bandwidth(q, p, candidates=None, n_eval: int = 300, seed: int = 0, adaptive_k: int | None = None) -> float:
    """Leave-one-out cross-validated bandwidth for the local quadratic fit."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    scale = np.mean(np.std(q, axis=0))
    if candidates is None:
        n_eff = len(q) ** (-1.0 / (q.shape[1] + 4))
        candidates = scale * n_eff * np.geomspace(0.25, 4.0, 9)
    rng = np.random.default_rng(seed)
    sub = rng.choice(len(q), size=min(n_eval, len(q)), replace=False)
    pf = PriceField(q, p, float(candidates[0]), adaptive_k=adaptive_k)
    best, best_h = np.inf, float(candidates[len(candidates) // 2])
    for h in candidates:
        val, _, _ = pf.local_fit(q[sub], exclude_self=True, bandwidth=float(h))
        err = np.nanmean((val - p[sub]) ** 2) if np.any(np.isfinite(val)) else np.inf
        if err < best:
            best, best_h = err, float(h)
    return best_h


def screened_records(ds: Dataset, q0=None, scatter_k: int = 15, scatter_tol: float = 0.02) -> np.ndarray:
    """Records in the full-dimensional part of the choice cloud.

    Records at the outside option, and records whose neighbourhood is
    nearly one-dimensional (smallest to largest local variance below
    ``scatter_tol``), are left out.
    """
    q = ds.q
    keep = np.ones(ds.n, dtype=bool)
    if q0 is not None:
        keep &= np.any(np.abs(q - np.asarray(q0)) > 1e-12, axis=1)
    if keep.sum() < scatter_k:
        return np.zeros(ds.n, dtype=bool)
    ratio = np.zeros(ds.n)
    ratio[keep] = local_scatter_ratio(q[keep], scatter_k)
    return keep & (ratio > scatter_tol)


def fit_price_field(ds: Dataset, bandwidth: float | None = None, min_points: int = 50, mesh: int = 41,
                    q0=None, restrict: bool = True, seed: int = 0, check: bool = False,
                    adaptive_k: int | None = 100) -> PriceField:
    """Fit the price surface on the screened part of one regime/covariate cell.

    Parameters
    ----------
    ds : Dataset
        Records from a single regime and covariate cell.
    bandwidth : float, optional
        Fixed bandwidth; cross-validated when omitted.
    min_points : int
        Minimum number of distinct screened choices.
    mesh : int
        Nodes per axis of the evaluation lattice.
    q0 : array, optional
        Outside option, excluded from the fit.
    restrict : bool
        Drop records that fail the local scatter test.
    check : bool
        Raise instead of warning when the shape checks fail everywhere.
    adaptive_k : int or None
        Nearest-neighbour cap on the bandwidth, see :class:`PriceField`.

    Raises
    ------
    InsufficientSupportError
        Too few distinct screened choices.
    ShapeCheckError
        ``check=True`` and no lattice node passes the gradient/Hessian checks.
    """
    keep = screened_records(ds, q0) if restrict else np.ones(ds.n, dtype=bool)
    q, p = ds.q[keep], ds.p[keep]
    if len(np.unique(q, axis=0)) < min_points:
        raise InsufficientSupportError(f"only {len(np.unique(q, axis=0))} distinct screened choices")
    h = bandwidth if bandwidth is not None else cv_bandwidth(q, p, seed=seed, adaptive_k=adaptive_k)
    pf = PriceField(q, p, h, adaptive_k=adaptive_k)
    pf.record_mask = keep
    rng = np.random.default_rng(seed)
    sub = rng.choice(len(q), size=min(300, len(q)), replace=False)
    val = pf.local_fit(q[sub])[0]
    pf.residual_scale = float(np.sqrt(np.nanmean((val - p[sub]) ** 2)))
    pf.build_mesh(mesh)
    if not pf.mask.any():
        if check:
            raise ShapeCheckError("price surface fails the gradient/Hessian checks at every lattice node")
        warnings.warn("price surface fails the gradient/Hessian checks everywhere", RuntimeWarning)
    return pf
