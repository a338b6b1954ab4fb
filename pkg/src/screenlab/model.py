"""Model primitives: type density, cost, utility and outside option.

Also provides the closed-form uniform-square candidate that serves as a
regression reference throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq

from .grids import DensityGrid


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CostSpec:
    """Convex production cost.

    Parameters
    ----------
    kind : {"quadratic", "polynomial", "tabulated"}
    params : mapping
        ``quadratic``: ``A`` (J x J, or scalar ``c`` for ``c I``), optional
        ``b`` and ``c0`` so that ``C(q) = q'Aq/2 + b'q + c0``.
        ``polynomial``: ``terms`` mapping exponent tuples to coefficients.
        ``tabulated``: ``axes`` and ``values`` on a lattice, cubic interpolation.
    eps : float
        Declared strong-convexity parameter.
    """

    kind: str
    params: Mapping
    eps: float = 1e-6
    dim: int = 2
    _tab: RegularGridInterpolator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("strong-convexity parameter must be positive")
        if self.kind == "quadratic":
            A = self.params.get("A", self.params.get("c", 1.0))
            A = np.asarray(A, dtype=float)
            if A.ndim == 0:
                A = float(A) * np.eye(self.dim)
            if A.shape != (self.dim, self.dim) or not np.allclose(A, A.T):
                raise ValueError("quadratic cost needs a symmetric J x J matrix")
            b = np.asarray(self.params.get("b", np.zeros(self.dim)), dtype=float)
            object.__setattr__(self, "params", {"A": A, "b": b, "c0": float(self.params.get("c0", 0.0))})
        elif self.kind == "polynomial":
            terms = {tuple(int(e) for e in k): float(v) for k, v in dict(self.params["terms"]).items()}
            if any(len(k) != self.dim for k in terms):
                raise ValueError("polynomial exponent tuples must have length J")
            object.__setattr__(self, "params", {"terms": terms})
        elif self.kind == "tabulated":
            axes = tuple(np.asarray(a, dtype=float) for a in self.params["axes"])
            vals = np.asarray(self.params["values"], dtype=float)
            interp = RegularGridInterpolator(axes, vals, method="cubic", bounds_error=False, fill_value=None)
            object.__setattr__(self, "_tab", interp)
        else:
            raise ValueError(f"unknown cost kind {self.kind!r}")

    @classmethod
    def quadratic(cls, c: float = 1.0, dim: int = 2) -> "CostSpec":
        if c <= 0:
            raise ValueError("cost scale must be positive")
        return cls("quadratic", {"c": c}, eps=c, dim=dim)

    def value(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if self.kind == "quadratic":
            A, b, c0 = self.params["A"], self.params["b"], self.params["c0"]
            return 0.5 * np.einsum("ni,ij,nj->n", q, A, q) + q @ b + c0
        if self.kind == "polynomial":
            out = np.zeros(len(q))
            for e, a in self.params["terms"].items():
                out += a * np.prod(q ** np.asarray(e), axis=1)
            return out
        return self._tab(q)

    def grad(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if self.kind == "quadratic":
            return q @ self.params["A"] + self.params["b"]
        if self.kind == "polynomial":
            out = np.zeros_like(q)
            for e, a in self.params["terms"].items():
                e = np.asarray(e)
                for j in range(self.dim):
                    if e[j] == 0:
                        continue
                    ej = e.copy()
                    ej[j] -= 1
                    out[:, j] += a * e[j] * np.prod(q ** ej, axis=1)
            return out
        return _fd_grad(self.value, q)

    def hess(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if self.kind == "quadratic":
            return np.broadcast_to(self.params["A"], (len(q), self.dim, self.dim)).copy()
        return _fd_jac(self.grad, q)

    def check_strong_convexity(self, probes) -> bool:
        """True when the Hessian's smallest eigenvalue is at least ``eps`` at every probe."""
        H = self.hess(probes)
        return bool(np.all(np.linalg.eigvalsh(H)[:, 0] >= self.eps * (1 - 1e-9)))


def _fd_grad(fn: Callable, q: np.ndarray, step: float = 1e-5) -> np.ndarray:
    out = np.empty_like(q)
    for j in range(q.shape[1]):
        e = np.zeros(q.shape[1])
        e[j] = step
        out[:, j] = (fn(q + e) - fn(q - e)) / (2 * step)
    return out


def _fd_jac(fn: Callable, q: np.ndarray, step: float = 1e-5) -> np.ndarray:
    J = q.shape[1]
    out = np.empty((len(q), J, J))
    for j in range(J):
        e = np.zeros(J)
        e[j] = step
        out[:, :, j] = (fn(q + e) - fn(q - e)) / (2 * step)
    return 0.5 * (out + np.transpose(out, (0, 2, 1)))


# ---------------------------------------------------------------------------
# utility
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class UtilitySpec:
    """Gross utility ``sum_j theta_j v_j(q_j) x_j``.

    ``linear`` uses ``v_j(q) = q`` and ignores covariates, ``bilinear``
    multiplies by ``X1_j`` and ``nonlinear`` uses the power family
    ``v_j(q) = q**omega_j`` (also scaled by ``X1_j`` when given).
    """

    variant: str = "linear"
    omega: tuple | None = None

    def __post_init__(self):
        if self.variant not in ("linear", "bilinear", "nonlinear"):
            raise ValueError(f"unknown utility variant {self.variant!r}")
        if self.variant == "nonlinear":
            if self.omega is None:
                raise ValueError("nonlinear utility needs exponents omega")
            om = tuple(float(w) for w in self.omega)
            if any(w <= 0 for w in om):
                raise ValueError("power exponents must be positive")
            object.__setattr__(self, "omega", om)

    def _om(self, J):
        if self.variant == "nonlinear":
            if len(self.omega) != J:
                raise ValueError("dimension mismatch between omega and q")
            return np.asarray(self.omega)
        return np.ones(J)

    def v(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if np.any(q < 0):
            raise ValueError("q outside the domain of v (negative component)")
        return q ** self._om(q.shape[-1])

    def dv(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        om = self._om(q.shape[-1])
        with np.errstate(divide="ignore"):
            return om * q ** (om - 1)

    def d2v(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        om = self._om(q.shape[-1])
        with np.errstate(divide="ignore"):
            return om * (om - 1) * q ** (om - 2)

    def v_inv(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.maximum(y, 0.0) ** (1.0 / self._om(y.shape[-1]))


def eval_utility(spec: UtilitySpec, theta, q, X1=None, X2=None) -> np.ndarray:
    """Gross utility of type ``theta`` consuming ``q``.

    Examples
    --------
    >>> eval_utility(UtilitySpec("linear"), [0.5, 0.5], [1.0, 2.0])
    1.5
    """
    theta = np.asarray(theta, dtype=float)
    q = np.asarray(q, dtype=float)
    if theta.shape[-1] != q.shape[-1]:
        raise ValueError(f"dimension mismatch: theta has {theta.shape[-1]}, q has {q.shape[-1]}")
    vq = spec.v(q)
    if spec.variant in ("bilinear", "nonlinear") and X1 is not None:
        X1 = np.asarray(X1, dtype=float)
        if X1.shape[-1] != q.shape[-1]:
            raise ValueError("dimension mismatch between X1 and q")
        vq = vq * X1
    elif spec.variant == "bilinear":
        raise ValueError("bilinear utility needs X1")
    out = np.sum(theta * vq, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Primitives:
    """Bundle of model primitives with validated invariants."""

    density: DensityGrid
    cost: CostSpec
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    q0: np.ndarray | None = None
    P0: float = 0.0

    def __post_init__(self):
        J = self.density.dim
        q0 = np.zeros(J) if self.q0 is None else np.asarray(self.q0, dtype=float)
        if q0.shape != (J,) or np.any(q0 < 0):
            raise ValueError("outside option q0 must be a nonnegative J-vector")
        object.__setattr__(self, "q0", q0)
        if self.cost.dim != J:
            raise ValueError("cost dimension differs from type dimension")
        if abs(self.density.mass() - 1.0) > 1e-6:
            raise ValueError("type density must integrate to one")
        if self.P0 < float(self.cost.value(q0)[0]) - 1e-12:
            raise ValueError("infeasible primitives: P0 < C(q0)")

    @property
    def dim(self) -> int:
        return self.density.dim

    def U0(self, theta, X1=None) -> np.ndarray:
        """Reservation utility ``theta . v(q0) - P0``."""
        return eval_utility(self.utility, np.atleast_2d(theta), np.broadcast_to(self.q0, np.atleast_2d(theta).shape), X1) - self.P0


def primitives_from_config(cfg: Mapping) -> Primitives:
    """Build primitives from a nested mapping.

    Keys: ``dimension``; ``density`` with ``kind`` (uniform | gaussian),
    ``bounds``, ``n`` and for gaussian ``mean``/``sd``; ``cost`` with
    ``kind`` plus the :class:`CostSpec` parameters; ``utility`` with
    ``variant`` and ``omega``; ``outside_option`` with ``q0`` and ``P0``.
    """
    J = int(cfg.get("dimension", 2))
    d = dict(cfg.get("density", {}))
    kind = d.get("kind", "uniform")
    bounds = d.get("bounds", [[0.0, 1.0]] * J)
    n = d.get("n", 101)
    if kind == "uniform":
        dens = DensityGrid.uniform(bounds, n)
    elif kind == "gaussian":
        mean = np.asarray(d.get("mean", [0.5] * J), dtype=float)
        sd = np.asarray(d.get("sd", [0.2] * J), dtype=float)
        dens = DensityGrid.from_function(
            lambda *x: np.exp(-0.5 * sum(((xi - m) / s) ** 2 for xi, m, s in zip(x, mean, sd))), bounds, n
        )
    else:
        raise ValueError(f"density.kind: unknown value {kind!r}")
    c = dict(cfg.get("cost", {"kind": "quadratic", "c": 1.0}))
    ckind = c.pop("kind", "quadratic")
    eps = float(c.pop("eps", c.get("c", 1.0) if ckind == "quadratic" and np.ndim(c.get("c", 1.0)) == 0 else 1e-6))
    cost = CostSpec(ckind, c, eps=eps, dim=J)
    u = dict(cfg.get("utility", {"variant": "linear"}))
    util = UtilitySpec(u.get("variant", "linear"), u.get("omega"))
    oo = dict(cfg.get("outside_option", {}))
    return Primitives(dens, cost, util, np.asarray(oo.get("q0", [0.0] * J)), float(oo.get("P0", 0.0)))


def uniform_square_primitives(c: float = 1.0, n: int = 101) -> Primitives:
    """Uniform types on the unit square, cost ``c/2 |q|^2``, null outside option."""
    return Primitives(DensityGrid.uniform(((0.0, 1.0), (0.0, 1.0)), n), CostSpec.quadratic(c))


# ---------------------------------------------------------------------------
# closed-form uniform-square candidate
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ClosedFormSolution:
    """Closed-form candidate on the uniform unit square.

    Attributes
    ----------
    c : float
        Cost scale.
    tau0 : float
        Exclusion threshold on ``tau = theta_1 + theta_2``.
    tau1 : float
        Upper end of the bunching band.  ``tau1_stated`` is the root of the
        stated condition ``rho_b(tau1) = 0`` (which coincides with ``tau0``);
        ``tau1`` defaults to 2, i.e. the band covers every participant, and
        can be replaced by a numerically determined value with
        :meth:`with_tau1`.
    """

    c: float
    tau0: float
    tau1: float
    tau1_stated: float

    def rho_b(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        return 3 * tau / (4 * self.c) - 1 / (2 * self.c * tau)

    def drho_b(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        return 3 / (4 * self.c) + 1 / (2 * self.c * tau ** 2)

    def U_b(self, tau) -> np.ndarray:
        """Indirect utility on the band, integral of ``rho_b`` from ``tau0``."""
        tau = np.asarray(tau, dtype=float)
        val = 3 * (tau ** 2 - self.tau0 ** 2) / (8 * self.c) - np.log(np.maximum(tau, 1e-300) / self.tau0) / (2 * self.c)
        return np.where(tau > self.tau0, val, 0.0)

    def region(self, theta) -> np.ndarray:
        """Labels 0 (excluded), 1 (band) and 2 (above the band) by ``tau``."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        tau = theta.sum(axis=1)
        lab = np.full(len(tau), 2, dtype=int)
        lab[tau <= self.tau1] = 1
        lab[tau < self.tau0] = 0
        return lab

    def allocation(self, theta) -> np.ndarray:
        """Allocation of the candidate; zero when excluded, ``rho_b`` on both goods otherwise."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        tau = theta.sum(axis=1)
        r = np.where(tau >= self.tau0, self.rho_b(np.maximum(tau, 1e-300)), 0.0)
        return np.stack([r, r], axis=1)

    def alpha(self, theta) -> np.ndarray:
        """Loss density: 3 when excluded and ``3 - 2 c rho_b'`` on the band."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        tau = theta.sum(axis=1)
        return np.where(tau < self.tau0, 3.0, 3.0 - 2 * self.c * self.drho_b(np.maximum(tau, 1e-300)))

    def beta_band_end(self, tau) -> np.ndarray:
        """Boundary density at either end of a band leaf, ``-c rho_b``."""
        return -self.c * self.rho_b(tau)

    def leaf_balance(self, tau) -> np.ndarray:
        """Leaf balance: integral of alpha along a leaf plus both end terms."""
        tau = np.asarray(tau, dtype=float)
        return tau * (3 - 2 * self.c * self.drho_b(tau)) + 2 * self.beta_band_end(tau)

    def with_tau1(self, tau1: float) -> "ClosedFormSolution":
        return ClosedFormSolution(self.c, self.tau0, float(tau1), self.tau1_stated)


def closed_form_example(c: float) -> ClosedFormSolution:
    """Closed-form candidate for uniform types on the unit square.

    Parameters
    ----------
    c : float
        Quadratic cost scale, ``C(q) = c/2 (q1^2 + q2^2)``.

    Examples
    --------
    >>> round(closed_form_example(1.0).tau0, 5)
    0.8165
    """
    if not c > 0:
        raise ValueError("cost scale c must be positive")
    tau0 = np.sqrt(6.0) / 3.0
    probe = ClosedFormSolution(float(c), tau0, 2.0, tau0)
    stated = brentq(lambda t: float(probe.rho_b(t)), 0.1, 2.0)
    return ClosedFormSolution(float(c), tau0, 2.0, stated)
