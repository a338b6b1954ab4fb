"""Spatial (geometric) multivariate quantiles.

The rank of a point ``q`` under a sample ``S`` is the average unit vector
``mean_i (q - S_i) / |q - S_i|``; it is the gradient of the convex function
``q -> mean_i (|q - S_i| - |S_i|)`` and maps into the open unit ball.  The
quantile at rank ``u`` is the point whose rank equals ``u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import Delaunay
from scipy.spatial.distance import cdist


class QuantileError(ValueError):
    pass


class ExtrapolationError(QuantileError):
    """A point lies outside the support of the sample it is ranked against."""

    def __init__(self, msg, points):
        super().__init__(msg)
        self.points = points


@dataclass
class InverseReport:
    newton: int = 0
    fallback: int = 0
    max_residual: float = 0.0


class QuantileMap:
    """Rank field of a point sample and its inverse.

    Parameters
    ----------
    sample : (n, J) array
    max_points : int, optional
        Deterministic random subsample size used for the sums.
    min_points : int
        Minimum sample size.
    seed : int
    chunk : int
        Query points per vectorized block.
    """

    def __init__(self, sample, max_points: int | None = 20000, min_points: int = 20, seed: int = 0,
                 chunk: int = 256):
        S = np.asarray(sample, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if len(S) < min_points:
            raise QuantileError(f"sample of {len(S)} points is below the minimum of {min_points}")
        if max_points is not None and len(S) > max_points:
            S = S[np.random.default_rng(seed).choice(len(S), max_points, replace=False)]
        self.sample = S
        self.chunk = chunk
        self.report = InverseReport()
        self._hull = None

    @property
    def dim(self) -> int:
        return self.sample.shape[1]

    def _blocks(self, q):
        q = np.asarray(q, dtype=float).reshape(-1, self.dim)
        for a in range(0, len(q), self.chunk):
            yield a, q[a:a + self.chunk]

    def rank(self, q) -> np.ndarray:
        """Average unit vector from the sample to each point (zero for coincident points)."""
        return self._moments(q, jac=False)[0]

    def rank_jacobian(self, q, floor: float = 1e-12) -> np.ndarray:
        """Derivative of the rank field, ``mean (I - e e^T) / r``."""
        return self._moments(q, jac=True, floor=floor)[1]

    def rank_and_jacobian(self, q, floor: float = 1e-12):
        """Rank field and its derivative in a single pass over the sample."""
        return self._moments(q, jac=True, floor=floor)

    def _moments(self, q, jac: bool, floor: float = 1e-12):
        # with w = 1/r the rank is q mean(w) - mean(w S); the Jacobian expands
        # the same way in w^3, so everything reduces to distance matrices and matmuls
        q = np.asarray(q, dtype=float).reshape(-1, self.dim)
        S = self.sample
        n, J = S.shape
        rk = np.empty_like(q)
        jm = np.empty((len(q), J, J)) if jac else None
        SS = (S[:, :, None] * S[:, None, :]).reshape(n, J * J) if jac else None
        eye = np.eye(J)
        for a, blk in self._blocks(q):
            r = cdist(blk, S)
            w = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
            sw = w.sum(axis=1)
            wS = w @ S
            rk[a:a + len(blk)] = (blk * sw[:, None] - wS) / n
            if jac:
                w1 = 1.0 / np.maximum(r, floor)
                w3 = w1 ** 3
                s3 = w3.sum(axis=1)
                w3S = w3 @ S
                w3SS = (w3 @ SS).reshape(-1, J, J)
                outer = blk[:, :, None] * blk[:, None, :] * s3[:, None, None] \
                    - blk[:, :, None] * w3S[:, None, :] - w3S[:, :, None] * blk[:, None, :] + w3SS
                jm[a:a + len(blk)] = (w1.sum(axis=1)[:, None, None] * eye - outer) / n
        return rk, jm

    def in_support(self, q) -> np.ndarray:
        """Inside the convex hull of the sample (J >= 2) or its range (J = 1)."""
        q = np.asarray(q, dtype=float).reshape(-1, self.dim)
        if self.dim == 1:
            return (q[:, 0] >= self.sample.min()) & (q[:, 0] <= self.sample.max())
        if self._hull is None:
            self._hull = Delaunay(self.sample)
        return self._hull.find_simplex(q) >= 0

    def inverse(self, u, q_init=None, tol: float = 1e-9, max_iter: int = 60) -> np.ndarray:
        """Point whose rank is ``u``.

        Damped Newton with step halving on the rank residual; points that
        fail to converge are finished by cyclic coordinate bisection, which
        converges because each rank coordinate is nondecreasing in its own
        coordinate.  Counts of both routes accumulate in ``self.report``.
        """
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        if np.any(np.linalg.norm(u, axis=1) >= 1):
            raise QuantileError("ranks must lie in the open unit ball")
        if q_init is None:
            q = np.tile(np.median(self.sample, axis=0), (len(u), 1))
        else:
            q = np.array(q_init, dtype=float).reshape(-1, self.dim)
        res = self.rank(q) - u
        nrm = np.linalg.norm(res, axis=1)
        active = nrm > tol
        if self.dim > 1:
            for _ in range(max_iter):
                if not active.any():
                    break
                ia = np.nonzero(active)[0]
                _, Jm = self.rank_and_jacobian(q[ia])
                try:
                    step = np.linalg.solve(Jm, res[ia][..., None])[..., 0]
                except np.linalg.LinAlgError:
                    break
                t = np.ones(len(ia))
                improved = np.zeros(len(ia), dtype=bool)
                for _ in range(30):
                    trial = q[ia] - t[:, None] * step
                    r_new = self.rank(trial) - u[ia]
                    n_new = np.linalg.norm(r_new, axis=1)
                    ok = (n_new < nrm[ia]) & ~improved
                    q[ia[ok]], res[ia[ok]], nrm[ia[ok]] = trial[ok], r_new[ok], n_new[ok]
                    improved |= ok
                    if improved.all():
                        break
                    t = np.where(improved, t, 0.5 * t)
                active[ia] = (nrm[ia] > tol) & improved
            self.report.newton += int(np.sum(nrm <= tol))
        todo = np.nonzero(nrm > tol)[0]
        if len(todo):
            q[todo] = self._bisect(u[todo], q[todo], tol)
            self.report.fallback += len(todo)
            nrm[todo] = np.linalg.norm(self.rank(q[todo]) - u[todo], axis=1)
        self.report.max_residual = max(self.report.max_residual, float(nrm.max()) if len(nrm) else 0.0)
        return q

    def _bisect(self, u, q, tol, sweeps: int = 60, steps: int = 60):
        lo0 = self.sample.min(axis=0)
        hi0 = self.sample.max(axis=0)
        span = hi0 - lo0
        q = q.copy()
        for _ in range(sweeps if self.dim > 1 else 1):
            for j in range(self.dim):
                lo = np.full(len(q), lo0[j] - 10 * span[j])
                hi = np.full(len(q), hi0[j] + 10 * span[j])
                for _ in range(steps):
                    mid = 0.5 * (lo + hi)
                    trial = q.copy()
                    trial[:, j] = mid
                    below = self.rank(trial)[:, j] < u[:, j]
                    lo = np.where(below, mid, lo)
                    hi = np.where(below, hi, mid)
                q[:, j] = 0.5 * (lo + hi)
            if np.all(np.linalg.norm(self.rank(q) - u, axis=1) <= tol):
                break
        return q


def mv_quantile(sample, **kw) -> QuantileMap:
    return QuantileMap(sample, **kw)


@dataclass
class QuantileMatch:
    """Equal-rank correspondence from a source sample to a target sample.

    ``s(q) = target.inverse(source.rank(q))``.  After :meth:`tabulate`, calls
    are served by bilinear interpolation on the lattice.
    """

    source: QuantileMap
    target: QuantileMap
    refuse_outside: bool = True
    table: RegularGridInterpolator | None = field(default=None, repr=False)
    table_mask: np.ndarray | None = field(default=None, repr=False)

    def exact(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1, self.source.dim)
        if self.refuse_outside:
            inside = self.source.in_support(q)
            if not inside.all():
                raise ExtrapolationError(f"{int(np.sum(~inside))} points outside the source support", q[~inside])
        return self.target.inverse(self.source.rank(q), q_init=q)

    def tabulate(self, axes, mask=None) -> "QuantileMatch":
        """Precompute the map on a lattice for fast interpolated calls.

        Values are computed on ``mask`` (default: nodes in the source hull)
        grown by one node, so that every cell touching the mask can be
        interpolated.  Support refusal still uses the source hull.
        """
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        flat = X.reshape(-1, len(axes))
        base = np.asarray(mask).reshape(X.shape[:-1]) if mask is not None \
            else self.source.in_support(flat).reshape(X.shape[:-1])
        grown = ndimage.binary_dilation(base, structure=np.ones((3,) * len(axes), dtype=bool)).reshape(-1)
        vals = np.full(flat.shape, np.nan)
        vals[grown] = self.target.inverse(self.source.rank(flat[grown]), q_init=flat[grown])
        self.table = RegularGridInterpolator(axes, vals.reshape(X.shape), bounds_error=False, fill_value=np.nan)
        self.table_mask = base
        return self

    def __call__(self, q) -> np.ndarray:
        if self.table is None:
            return self.exact(q)
        q = np.asarray(q, dtype=float).reshape(-1, self.source.dim)
        if self.refuse_outside:
            inside = self.source.in_support(q)
            if not inside.all():
                raise ExtrapolationError(f"{int(np.sum(~inside))} points outside the source support", q[~inside])
        out = self.table(q)
        bad = ~np.all(np.isfinite(out), axis=1)
        if bad.any():
            out[bad] = self.exact(q[bad])
        return out


def quantile_match(source_sample, target_sample, **kw) -> QuantileMatch:
    """Map sending each source point to the target point of equal spatial rank."""
    return QuantileMatch(QuantileMap(source_sample, **kw), QuantileMap(target_sample, **kw))
