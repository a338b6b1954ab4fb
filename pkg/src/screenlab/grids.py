"""Densities tabulated on rectangular lattices.

A :class:`DensityGrid` stores nonnegative nodal values on a tensor-product
lattice and integrates them with the trapezoidal rule.  It is the common
currency for type densities, choice densities and recovered densities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator


def trapezoid_weights(axis: np.ndarray) -> np.ndarray:
    """One-dimensional trapezoidal quadrature weights for the nodes ``axis``."""
    axis = np.asarray(axis, dtype=float)
    if axis.size == 1:
        return np.ones(1)
    d = np.diff(axis)
    w = np.zeros_like(axis)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def tensor_weights(axes: Sequence[np.ndarray]) -> np.ndarray:
    """Tensor-product trapezoidal weights with shape ``(len(a) for a in axes)``."""
    w = np.ones(())
    for a in axes:
        w = np.multiply.outer(w, trapezoid_weights(a))
    return w


@dataclass(frozen=True)
class DensityGrid:
    """Nonnegative density values on a rectangular lattice.

    Parameters
    ----------
    axes : tuple of 1-D arrays
        Node coordinates along each dimension (strictly increasing).
    values : ndarray
        Density at the nodes, shape ``tuple(len(a) for a in axes)``.
    normalized : bool
        Whether ``values`` has been rescaled to unit trapezoidal mass.
    """

    axes: tuple
    values: np.ndarray
    normalized: bool = True
    _interp: RegularGridInterpolator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        vals = np.array(self.values, dtype=float)
        if vals.shape != tuple(len(a) for a in axes):
            raise ValueError(f"values shape {vals.shape} does not match axes")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("density values must be finite and nonnegative")
        for a in axes:
            if a.size > 1 and np.any(np.diff(a) <= 0):
                raise ValueError("axes must be strictly increasing")
        vals.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", vals)
        interp = RegularGridInterpolator(axes, vals, bounds_error=False, fill_value=0.0)
        object.__setattr__(self, "_interp", interp)

    # construction -------------------------------------------------------
    @classmethod
    def from_function(cls, fn: Callable[..., np.ndarray], bounds, n, normalize=True):
        """Tabulate ``fn(*coords)`` on a lattice over ``bounds`` with ``n`` nodes per axis."""
        bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
        if np.isscalar(n):
            n = [int(n)] * len(bounds)
        axes = tuple(np.linspace(lo, hi, k) for (lo, hi), k in zip(bounds, n))
        mesh = np.meshgrid(*axes, indexing="ij")
        vals = np.broadcast_to(np.asarray(fn(*mesh), dtype=float), mesh[0].shape)
        g = cls(axes, vals, normalized=False)
        return g.normalize() if normalize else g

    @classmethod
    def uniform(cls, bounds=((0.0, 1.0), (0.0, 1.0)), n=101):
        """Uniform density on a box."""
        return cls.from_function(lambda *x: np.ones_like(x[0]), bounds, n)

    # basic properties ---------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def bounds(self) -> np.ndarray:
        return np.array([[a[0], a[-1]] for a in self.axes])

    @property
    def weights(self) -> np.ndarray:
        return tensor_weights(self.axes)

    def mass(self) -> float:
        return float(np.sum(self.values * self.weights))

    def normalize(self) -> "DensityGrid":
        m = self.mass()
        if m <= 0:
            raise ValueError("density has zero mass")
        return DensityGrid(self.axes, self.values / m, normalized=True)

    def nodes(self) -> np.ndarray:
        """All node coordinates as an ``(N, J)`` array in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def pdf(self, pts) -> np.ndarray:
        """Multilinear interpolation of the density, zero outside the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self._interp(pts)

    def resample(self, axes) -> "DensityGrid":
        """Interpolate onto a new lattice and renormalize."""
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = self.pdf(pts).reshape(mesh[0].shape)
        return DensityGrid(axes, vals, normalized=False).normalize()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` points from the multilinear density.

        A cell is drawn with probability equal to its exact multilinear mass
        and the point within the cell by sequential inversion of the
        conditional (linear) marginals, so the sampler is exact for the
        interpolant.
        """
        vals = self.values
        J = self.dim
        # corners[b_0, ..., b_{J-1}, cell...] with b_k selecting the upper node on axis k
        corners = np.empty((2,) * J + tuple(s - 1 for s in vals.shape))
        for bits in np.ndindex(*(2,) * J):
            sl = tuple(slice(1, None) if b else slice(None, -1) for b in bits)
            corners[bits] = vals[sl]
        widths = [np.diff(a) for a in self.axes]
        vol = np.ones(corners.shape[J:])
        for k, w in enumerate(widths):
            shp = [1] * J
            shp[k] = -1
            vol = vol * w.reshape(shp)
        cell_mass = corners.reshape(2 ** J, -1).mean(axis=0).reshape(vol.shape) * vol
        p = cell_mass.ravel() / cell_mass.sum()
        cells = rng.choice(p.size, size=n, p=p)
        idx = np.unravel_index(cells, cell_mass.shape)
        c = corners.reshape((2,) * J + (-1,))[..., cells]
        out = np.empty((n, J))
        u = rng.random((n, J))
        for k in range(J):
            a0 = c[0].reshape(-1, n).mean(axis=0)
            a1 = c[1].reshape(-1, n).mean(axis=0)
            t = _invert_linear_cdf(a0, a1, u[:, k])
            out[:, k] = self.axes[k][idx[k]] + t * widths[k][idx[k]]
            c = c[0] * (1 - t) + c[1] * t
        return out

    def marginal_cdf(self, k: int):
        """Node coordinates and trapezoidal CDF of the ``k``-th marginal."""
        other = tuple(i for i in range(self.dim) if i != k)
        w = self.weights
        marg = np.sum(self.values * w, axis=other) / trapezoid_weights(self.axes[k])
        cdf = np.concatenate([[0.0], np.cumsum((marg[1:] + marg[:-1]) / 2 * np.diff(self.axes[k]))])
        return self.axes[k], cdf / cdf[-1]


def _invert_linear_cdf(a0, a1, u):
    """Invert the CDF of the density proportional to ``a0 (1-t) + a1 t`` on [0, 1]."""
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    tot = (a0 + a1) / 2
    target = u * tot
    d = a1 - a0
    t = np.empty_like(target)
    flat = np.abs(d) < 1e-12 * np.maximum(tot, 1e-300)
    t[flat] = u[flat]
    nf = ~flat
    # a0 t + d t^2 / 2 = target
    disc = np.maximum(a0[nf] ** 2 + 2 * d[nf] * target[nf], 0.0)
    t[nf] = 2 * target[nf] / (a0[nf] + np.sqrt(disc))
    return np.clip(t, 0.0, 1.0)

