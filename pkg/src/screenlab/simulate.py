"""Market data generation from solved menus and analytic generators."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .grids import DensityGrid
from .model import ClosedFormSolution, Primitives, UtilitySpec
from .solver import Menu


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Dataset:
    """Immutable consumer records.

    Attributes
    ----------
    q : (n, J) array
        Chosen bundles.
    p : (n,) array
        Prices paid.
    X1 : (n, J) array
        Covariates entering utility multiplicatively.
    X2 : (n, K) array
        Other covariates (``K`` may be zero).
    z : (n,) int array
        Cost regime code, 1 or 2.
    meta : dict
        Provenance (seed, generator, noise settings).
    truth : dict
        Generator-side quantities such as the drawn types.  Never written to
        the record files; kept for round-trip experiments.
    """

    q: np.ndarray
    p: np.ndarray
    X1: np.ndarray | None = None
    X2: np.ndarray | None = None
    z: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        q = np.array(self.q, dtype=float, ndmin=2)
        n = len(q)
        p = np.array(self.p, dtype=float).reshape(n)
        X1 = np.ones((n, q.shape[1])) if self.X1 is None else np.array(self.X1, dtype=float).reshape(n, -1)
        X2 = np.zeros((n, 0)) if self.X2 is None else np.array(self.X2, dtype=float).reshape(n, -1)
        z = np.ones(n, dtype=int) if self.z is None else np.array(self.z, dtype=int).reshape(n)
        if not set(np.unique(z)) <= {1, 2}:
            raise ValueError("regime codes must be 1 or 2")
        for a in (q, p, X1, X2, z):
            a.setflags(write=False)
        for k, v in zip(("q", "p", "X1", "X2", "z"), (q, p, X1, X2, z)):
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return len(self.p)

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        truth = {k: (v[mask] if isinstance(v, np.ndarray) and len(v) == self.n else v) for k, v in self.truth.items()}
        return Dataset(self.q[mask], self.p[mask], self.X1[mask], self.X2[mask], self.z[mask], dict(self.meta), truth)

    def regime(self, code: int) -> "Dataset":
        return self.subset(self.z == code)

    def with_prices(self, p) -> "Dataset":
        return Dataset(self.q, p, self.X1, self.X2, self.z, dict(self.meta), dict(self.truth))

    def concat(self, other: "Dataset") -> "Dataset":
        truth = {}
        for k in self.truth:
            a, b = self.truth[k], other.truth.get(k)
            if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
                truth[k] = np.concatenate([a, b])
        return Dataset(np.vstack([self.q, other.q]), np.r_[self.p, other.p], np.vstack([self.X1, other.X1]),
                       np.vstack([self.X2, other.X2]), np.r_[self.z, other.z], dict(self.meta), truth)


@dataclass(frozen=True)
class CovariateLaw:
    """Law of the covariates, independent of types.

    ``kind="none"`` sets ``X1`` to ones.  ``kind="directions"`` draws an
    angle uniformly on ``[angle_lo, angle_hi)`` and a radius uniformly on
    ``[r_lo, r_hi]`` and sets ``X1 = r (cos a, sin a)``; the default range
    covers every direction, which the Radon inversion needs.  ``k2`` extra
    covariates are uniform on [0, 1].
    """

    kind: str = "none"
    angle_lo: float = 0.0
    angle_hi: float = 2 * np.pi
    r_lo: float = 0.5
    r_hi: float = 1.5
    k2: int = 0

    def draw(self, n: int, J: int, rng: np.random.Generator):
        if self.kind == "none":
            X1 = np.ones((n, J))
        elif self.kind == "directions":
            if J != 2:
                raise ValueError("direction law is defined for J = 2")
            a = rng.uniform(self.angle_lo, self.angle_hi, n)
            r = rng.uniform(self.r_lo, self.r_hi, n)
            X1 = r[:, None] * np.c_[np.cos(a), np.sin(a)]
        else:
            raise ValueError(f"unknown covariate law {self.kind!r}")
        X2 = rng.random((n, self.k2))
        return X1, X2


@dataclass(frozen=True)
class NoiseSpec:
    """Price measurement error and market-level taste shifter.

    ``shifter="lognormal"`` draws ``log Y ~ N(log_mean, shifter_sd)``; the
    zero-log-mean restriction requires ``log_mean == 0``.
    """

    sigma_eps: float = 0.0
    shifter: str = "degenerate"
    shifter_sd: float = 0.0
    log_mean: float = 0.0

    def __post_init__(self):
        if self.sigma_eps < 0 or self.shifter_sd < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.shifter not in ("degenerate", "lognormal"):
            raise ValueError(f"unknown shifter law {self.shifter!r}")
        if abs(self.log_mean) > 1e-9:
            raise ValueError("taste shifter must satisfy E[log Y] = 0")

    def draw_shifter(self, size, rng: np.random.Generator) -> np.ndarray:
        if self.shifter == "degenerate":
            return np.ones(size)
        return np.exp(rng.normal(self.log_mean, self.shifter_sd, size))


# ---------------------------------------------------------------------------
# menus
# ---------------------------------------------------------------------------
def _menu_interpolators(menu: Menu):
    ax = menu.axes
    mk = lambda v: RegularGridInterpolator(ax, v, bounds_error=False, fill_value=None)  # noqa: E731
    return (mk(menu.y[..., 0]), mk(menu.y[..., 1]), mk(menu.U), mk((menu.labels == 0).astype(float)),
            mk(menu.labels.astype(float)))


def _allocate_menu(menu: Menu, prim: Primitives, theta: np.ndarray):
    y0, y1, U, excl, lab = _menu_interpolators(menu)
    y = np.c_[y0(theta), y1(theta)]
    u = U(theta)
    out_excl = excl(theta) >= 0.5
    X1 = np.asarray(menu.X1, dtype=float)
    q = prim.utility.v_inv(np.maximum(y, 0.0) / X1)
    p = np.sum(theta * y, axis=1) - u
    q[out_excl] = prim.q0
    p[out_excl] = prim.P0
    region = np.rint(lab(theta)).astype(int)
    region[out_excl] = 0
    region[~out_excl & (region == 0)] = 1
    return q, p, region


def _allocate_closed_form(cf: ClosedFormSolution, theta: np.ndarray):
    tau = theta.sum(axis=1)
    region = cf.region(theta)
    if np.any(region == 2):
        raise ValueError("the closed form does not specify allocations above the bunching band")
    q = cf.allocation(theta)
    p = np.where(region == 0, 0.0, tau * q[:, 0] - cf.U_b(tau))
    return q, p, region


def sample_market(menu, prim: Primitives, n: int, seed: int, covariate_law: CovariateLaw | None = None,
                  regime: int = 1, theta: np.ndarray | None = None) -> Dataset:
    """Draw consumers, apply the menu and return their records.

    Parameters
    ----------
    menu : Menu or ClosedFormSolution
    prim : Primitives
    n : int
        Number of consumers.
    seed : int
    covariate_law : CovariateLaw, optional
        Defaults to constant covariates.
    regime : int
        Regime code stamped on the records.
    theta : array, optional
        Types to use instead of fresh draws (common draws across regimes).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    law = covariate_law or CovariateLaw()
    rng = np.random.default_rng(seed)
    if theta is None:
        theta = prim.density.sample(n, rng)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (n, prim.dim):
        raise ValueError("type draws must have shape (n, J)")
    X1, X2 = law.draw(n, prim.dim, rng)
    if isinstance(menu, Menu):
        if len(menu.axes) != prim.dim:
            raise ValueError("menu and primitives differ in dimension")
        q, p, region = _allocate_menu(menu, prim, theta)
        gen = "menu"
    elif isinstance(menu, ClosedFormSolution):
        if prim.dim != 2:
            raise ValueError("closed form is two-dimensional")
        q, p, region = _allocate_closed_form(menu, theta)
        gen = "closed_form"
    else:
        raise TypeError("menu must be a Menu or a ClosedFormSolution")
    meta = {"seed": int(seed), "generator": gen, "n": int(n), "covariate_law": law.kind}
    return Dataset(q, p, X1, X2, np.full(n, regime), meta, {"theta": theta, "region": region})


def apply_price_noise(ds: Dataset, spec: NoiseSpec, seed: int) -> Dataset:
    """Add independent mean-zero Gaussian errors to the prices."""
    if spec.sigma_eps == 0:
        return ds
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, spec.sigma_eps, ds.n)
    out = ds.with_prices(ds.p + eps)
    meta = dict(out.meta, price_noise_sd=spec.sigma_eps, price_noise_seed=int(seed))
    return replace(out, meta=meta)


def apply_taste_shifter(prim: Primitives, spec: NoiseSpec, seed: int) -> tuple[Primitives, float]:
    """Scale types by one market-level draw ``Y``; returns the new primitives and ``Y``."""
    if abs(spec.log_mean) > 1e-9:
        raise ValueError("taste shifter must satisfy E[log Y] = 0")
    rng = np.random.default_rng(seed)
    Y = float(spec.draw_shifter(1, rng)[0])
    if Y == 1.0:
        return prim, Y
    d = prim.density
    axes = tuple(a * Y for a in d.axes)
    dens = DensityGrid(axes, d.values / Y ** d.dim, normalized=False).normalize()
    return replace(prim, density=dens), Y


def sample_shifted_markets(theta_sampler, n_markets: int, per_market: int, spec: NoiseSpec, seed: int):
    """Pseudo-types ``Y_m theta_i`` for consumers grouped in markets.

    Returns an array of shape ``(n_markets, per_market, J)`` and the drawn
    shifters ``Y_m``.
    """
    rng = np.random.default_rng(seed)
    Y = spec.draw_shifter(n_markets, rng)
    th = theta_sampler(n_markets * per_market, rng)
    th = np.asarray(th, dtype=float).reshape(n_markets, per_market, -1)
    return th * Y[:, None, None], Y


# ---------------------------------------------------------------------------
# analytic generator with a known screened region
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SeparableGenerator:
    """Two-regime generator with closed-form screening on a type box.

    Types are uniform on ``[lo, 1]^J``, a box inside the unit type square,
    with utility ``theta_j q_j**omega_j`` and regime-1 cost ``c/2 |q|^2``.
    In each regime the choice solves
    ``phi_j(theta_j) v_j'(q_j) = dC/dq_j`` with
    ``phi_j = theta_j - (1 - theta_j) / J``, which satisfies the interior
    optimality equation and the zero-distortion condition on the outer faces
    ``theta_j = 1``.

    Regime 2 comes in two flavours, both making the price gradients of the
    two regimes coincide at ``q_hat = rho_1(theta_hat)``:

    ``"quadratic"``
        Cost ``scale * c/2 |q|^2 - (scale - 1) c q_hat . q``, whose
        marginal cost crosses the regime-1 one at ``q_hat``.
    ``"similarity"``
        Choices are regime-1 choices contracted towards ``q_hat`` by
        ``kappa``; the cost is whatever supports that allocation.  Spatial
        quantiles commute with this map, which makes the quantile match
        exact.
    """

    omega: tuple = (1.0, 1.0)
    c: float = 1.0
    lo: float = 0.45
    regime2: str = "quadratic"
    scale: float = 1.5
    kappa: float = 1 / 1.5
    theta_hat: tuple = (0.75, 0.75)

    def __post_init__(self):
        J = len(self.omega)
        if not (1.0 / (J + 1) < self.lo < 1.0):
            raise ValueError("lower type bound must exceed 1/(J+1) so that choices are positive")
        if self.regime2 not in ("quadratic", "similarity"):
            raise ValueError(f"unknown regime-2 flavour {self.regime2!r}")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.scale <= 1:
            raise ValueError("scale must exceed 1")
        object.__setattr__(self, "_splines", self._build_price_splines())

    # primitives --------------------------------------------------------
    @property
    def J(self) -> int:
        return len(self.omega)

    @property
    def om(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)

    @property
    def utility(self) -> UtilitySpec:
        if np.all(self.om == 1.0):
            return UtilitySpec("linear")
        return UtilitySpec("nonlinear", self.omega)

    @property
    def type_bounds(self) -> np.ndarray:
        return np.array([[self.lo, 1.0]] * self.J)

    def phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta - (1 - theta) / self.J

    def theta_of_phi(self, phi):
        return (self.J * np.asarray(phi) + 1) / (self.J + 1)

    def dv(self, q):
        return self.om * np.asarray(q, dtype=float) ** (self.om - 1)

    def d2v(self, q):
        return self.om * (self.om - 1) * np.asarray(q, dtype=float) ** (self.om - 2)

    @property
    def q_hat(self) -> np.ndarray:
        return self.rho1(np.asarray(self.theta_hat, dtype=float))

    # costs -------------------------------------------------------------
    def x_of_q2(self, q):
        """Regime-1 choice of the type choosing ``q`` in the similarity regime 2."""
        return self.q_hat + (np.asarray(q, dtype=float) - self.q_hat) / self.kappa

    def cost_grad(self, q, regime: int):
        q = np.asarray(q, dtype=float)
        if regime == 1:
            return self.c * q
        if self.regime2 == "quadratic":
            return self.c * (self.scale * q - (self.scale - 1) * self.q_hat)
        x = self.x_of_q2(q)
        return self.c * q ** (self.om - 1) * x ** (2 - self.om)

    def cost_hess_diag(self, q, regime: int):
        q = np.asarray(q, dtype=float)
        if regime == 1:
            return np.full_like(q, self.c)
        if self.regime2 == "quadratic":
            return np.full_like(q, self.c * self.scale)
        om = self.om
        x = self.x_of_q2(q)
        return self.c * ((om - 1) * q ** (om - 2) * x ** (2 - om)
                         + q ** (om - 1) * (2 - om) * x ** (1 - om) / self.kappa)

    def cost(self, q, regime: int):
        """Cost level, zero at the origin (quadratic regimes only)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if regime == 1:
            return 0.5 * self.c * np.sum(q ** 2, axis=1)
        if self.regime2 == "quadratic":
            return self.c * (0.5 * self.scale * np.sum(q ** 2, axis=1) - (self.scale - 1) * q @ self.q_hat)
        raise NotImplementedError("similarity regime has no closed-form cost level")

    # allocations -------------------------------------------------------
    def rho1(self, theta):
        om = self.om
        return (om * self.phi(theta) / self.c) ** (1 / (2 - om))

    def rho2(self, theta):
        if self.regime2 == "similarity":
            return self.q_hat + self.kappa * (self.rho1(theta) - self.q_hat)
        phi = np.atleast_1d(self.phi(theta)).astype(float)
        # phi v'(q) - C_2'(q) is decreasing in q; bracket it and bisect
        lo = np.broadcast_to((self.scale - 1) / self.scale * self.q_hat, phi.shape).copy()
        hi = np.maximum(lo, 1.0)
        while True:
            g = phi * self.dv(hi) - self.cost_grad(hi, 2)
            if np.all(g < 0):
                break
            hi = np.where(g >= 0, 2 * hi, hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            g = phi * self.dv(mid) - self.cost_grad(mid, 2)
            lo = np.where(g > 0, mid, lo)
            hi = np.where(g > 0, hi, mid)
            if np.max(hi - lo) < 1e-15:
                break
        return 0.5 * (lo + hi)

    def rho(self, theta, regime: int):
        return self.rho1(theta) if regime == 1 else self.rho2(theta)

    def theta1(self, q):
        """Type choosing ``q`` in regime 1."""
        return self.theta_of_q(q, 1)

    def theta_of_q(self, q, regime: int):
        q = np.asarray(q, dtype=float)
        return self.theta_of_phi(self.cost_grad(q, regime) / self.dv(q))

    def dtheta_diag(self, q, regime: int):
        """Diagonal of the Jacobian of the type map ``q -> theta``."""
        q = np.asarray(q, dtype=float)
        v1, v2 = self.dv(q), self.d2v(q)
        dphi = (self.cost_hess_diag(q, regime) * v1 - self.cost_grad(q, regime) * v2) / v1 ** 2
        return self.J / (self.J + 1) * dphi

    def price_grad(self, q, regime: int):
        q = np.asarray(q, dtype=float)
        return self.theta_of_q(q, regime) * self.dv(q)

    def price_hess_diag(self, q, regime: int):
        """Diagonal of the (diagonal) price Hessian."""
        q = np.asarray(q, dtype=float)
        return self.dtheta_diag(q, regime) * self.dv(q) + self.theta_of_q(q, regime) * self.d2v(q)

    def _qrange(self, regime):
        lo = self.rho(np.full(self.J, self.lo), regime)
        hi = self.rho(np.ones(self.J), regime)
        return lo, hi

    def _build_price_splines(self):
        out = {}
        for regime in (1, 2):
            lo, hi = self._qrange(regime)
            sp = []
            for j in range(self.J):
                grid = np.linspace(lo[j] * 0.9, hi[j] * 1.1, 4001)
                qq = np.zeros((len(grid), self.J)) + self.q_hat
                qq[:, j] = grid
                g = self.price_grad(qq, regime)[:, j]
                # cumulative Simpson on a fine grid, then a cubic spline
                cs = CubicSpline(grid, g)
                integ = cs.antiderivative()
                sp.append((integ, float(integ(self.q_hat[j]))))
            out[regime] = sp
        return out

    def price(self, q, regime: int):
        """Separable price schedule, normalized to ``sum_j q_hat_j`` at ``q_hat``."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        tot = np.zeros(len(q)) + float(np.sum(self.q_hat))
        for j, (integ, at_hat) in enumerate(self._splines[regime]):
            tot += integ(q[:, j]) - at_hat
        return tot

    def choice_density(self, q, regime: int):
        """Density of choices (uniform types pushed through the allocation)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        theta = self.theta_of_q(q, regime)
        dth = self.dtheta_diag(q, regime)
        inside = np.all((theta >= self.lo) & (theta <= 1.0), axis=1)
        f = 1.0 / (1 - self.lo) ** self.J
        return np.where(inside, f * np.prod(np.abs(dth), axis=1), 0.0)

    def sample_types(self, n: int, rng: np.random.Generator):
        return rng.uniform(self.lo, 1.0, (n, self.J))

    def sample(self, n: int, seed: int, regimes=(1, 2), common_types: bool = True,
               covariate_law: CovariateLaw | None = None) -> Dataset:
        """Records for each requested regime; types are shared across regimes when ``common_types``."""
        rng = np.random.default_rng(seed)
        law = covariate_law or CovariateLaw()
        th = self.sample_types(n, rng)
        parts = []
        for r in regimes:
            t = th if common_types else self.sample_types(n, rng)
            q = self.rho(t, r)
            p = self.price(q, r)
            X1, X2 = law.draw(n, self.J, rng)
            parts.append(Dataset(q, p, X1, X2, np.full(n, r),
                                 {"seed": int(seed), "generator": "separable", "n": int(n)},
                                 {"theta": t}))
        out = parts[0]
        for d in parts[1:]:
            out = out.concat(d)
        return out


# ---------------------------------------------------------------------------
# stylized bilinear generator
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BilinearBandGenerator:
    """Bilinear-utility records whose bunched consumers share a straight flat.

    Types are drawn from ``density`` (any sampler on the type square).
    Those in the band ``tau_lo <= theta_1 + theta_2 <= tau_hi`` choose on
    the line ``q_c + s e`` with ``e = (1, 1)/sqrt(2)`` from the price
    ``kappa s^2 / 2 + p_c``, so that the chosen arclength is
    ``s = theta . (X1 o e) / kappa``.  Everyone else is screened by the
    full-dimensional price ``|q - q_s|^2 / 2`` with ``q = q_s + theta o X1``.
    The band's choice rule depends on types only through the index
    ``W = theta . X1``.
    """

    tau_lo: float = np.sqrt(6) / 3
    tau_hi: float = 1.4
    kappa: float = 1.0
    q_c: tuple = (3.0, 3.0)
    q_s: tuple = (8.0, 2.0)
    p_c: float = 1.0

    @property
    def e(self) -> np.ndarray:
        return np.ones(2) / np.sqrt(2)

    def in_band(self, theta):
        tau = np.asarray(theta).sum(axis=1)
        return (tau >= self.tau_lo) & (tau <= self.tau_hi)

    def sample(self, theta: np.ndarray, X1: np.ndarray, seed: int = 0) -> Dataset:
        theta = np.asarray(theta, dtype=float)
        X1 = np.asarray(X1, dtype=float)
        band = self.in_band(theta)
        idx = np.sum(theta * X1 * self.e, axis=1)
        s = idx / self.kappa
        q = np.where(band[:, None], np.asarray(self.q_c) + s[:, None] * self.e, np.asarray(self.q_s) + theta * X1)
        p = np.where(band, self.kappa * s ** 2 / 2 + self.p_c, 0.5 * np.sum((q - np.asarray(self.q_s)) ** 2, axis=1))
        n = len(theta)
        return Dataset(q, p, X1, np.zeros((n, 0)), np.ones(n, dtype=int),
                       {"seed": int(seed), "generator": "bilinear_band", "n": n},
                       {"theta": theta, "band": band, "W": np.sum(theta * X1, axis=1)})
