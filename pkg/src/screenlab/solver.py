"""Discretized monopolist problem over convex indirect utilities.

The type box is split into grid cells and every cell contributes the four
corner triangles of its two diagonal triangulations, each carrying a
quarter of the cell area.  On a triangle the indirect utility is affine, so
its gradient is exact and the profit integrand
``theta . grad U - U - C~(grad U)`` is evaluated at the triangle centroid.
``C~(y) = C(v^{-1}(y))`` is the cost expressed in utility units.

Convexity is imposed node by node: nonnegative second differences along the
two axes and the two diagonals plus a positive semidefinite 2 x 2 discrete
Hessian.  Participation is ``U >= U0`` and admissibility of choices is a
nonnegative discrete gradient.  The resulting second-order cone program is
handed to cvxpy; :func:`solve_generic_oracle` solves the identical finite
program with scipy's SLSQP as an independent check on small grids.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .model import Primitives


class SolverError(RuntimeError):
    """Raised when the optimizer fails; carries the best iterate when one exists."""

    def __init__(self, msg, best=None, diagnostics=None):
        super().__init__(msg)
        self.best = best
        self.diagnostics = diagnostics or {}


class ClassificationUnstableWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings for :func:`solve_equilibrium`.

    Attributes
    ----------
    mesh : int
        Nodes per axis.
    tol : float
        Conic solver feasibility and gap tolerance.
    max_iter : int
        Interior-point iteration cap.
    convexity_tol : float
        Slack allowed in the discrete convexity checks of a returned menu.
    bunch_tol : float
        Relative eigenvalue threshold for rank-deficient discrete Hessians.
    gap_tol : float
        Absolute threshold on ``U - U0`` below which a node is excluded.
    ambiguity_frac : float
        Fraction of ambiguous nodes above which a warning is issued.
    solver : str
        cvxpy solver name.
    """

    mesh: int = 101
    tol: float = 1e-8
    max_iter: int = 500
    convexity_tol: float = 1e-7
    bunch_tol: float = 1e-3
    gap_tol: float = 1e-6
    ambiguity_frac: float = 0.02
    solver: str = "CLARABEL"

    def __post_init__(self):
        for name in ("tol", "convexity_tol", "bunch_tol", "gap_tol", "ambiguity_frac"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.mesh < 3 or self.max_iter < 1:
            raise ValueError("mesh must be >= 3 and max_iter >= 1")


# ---------------------------------------------------------------------------
# cost in utility units
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class _UtilityUnitCost:
    """``C~(y) = C(q(y))`` with ``y_j = x_j v_j(q_j)``."""

    prim: Primitives
    X1: np.ndarray

    def q_of_y(self, y):
        return self.prim.utility.v_inv(np.maximum(y, 0.0) / self.X1)

    def value(self, y):
        return self.prim.cost.value(self.q_of_y(y))

    def grad(self, y):
        """Gradient in utility units: ``dC/dq_j / (x_j v_j'(q_j))``."""
        q = self.q_of_y(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = self.prim.cost.grad(q) / (self.X1 * self.prim.utility.dv(q))
        if self.prim.utility.variant == "nonlinear":
            # q = 0 is a limit point where v' blows up; the ratio tends to zero
            g = np.where(np.isfinite(g), g, 0.0)
        return g

    def cvx(self, gx, gy, wf):
        """cvxpy expression for ``sum wf * C~(gx, gy)``."""
        import cvxpy as cp

        cost, util = self.prim.cost, self.prim.utility
        if cost.kind != "quadratic":
            raise NotImplementedError("the conic solver supports quadratic costs only")
        A, b, c0 = cost.params["A"], cost.params["b"], cost.params["c0"]
        if util.variant in ("linear", "bilinear"):
            Dinv = np.diag(1.0 / self.X1)
            A2 = Dinv @ A @ Dinv
            b2 = Dinv @ b
            L = np.linalg.cholesky(A2 + 1e-300 * np.eye(2))
            z1 = L[0, 0] * gx + L[1, 0] * gy
            z2 = L[1, 1] * gy
            return (cp.sum(cp.multiply(wf / 2, cp.square(z1) + cp.square(z2)))
                    + (wf * b2[0]) @ gx + (wf * b2[1]) @ gy + c0 * wf.sum())
        if np.any(np.abs(A - np.diag(np.diag(A))) > 0) or np.any(b != 0):
            raise NotImplementedError("nonlinear utility needs a diagonal quadratic cost without linear term")
        om = np.asarray(util.omega)
        terms = []
        for j, g in enumerate((gx, gy)):
            p = 2.0 / om[j]
            # (g / x)^(2/omega) scaled by A_jj / 2
            coef = A[j, j] / 2 * self.X1[j] ** (-p)
            terms.append(cp.sum(cp.multiply(wf * coef, cp.power(g, p))))
        return terms[0] + terms[1] + c0 * wf.sum()


# ---------------------------------------------------------------------------
# discrete program
# ---------------------------------------------------------------------------
@dataclass
class DiscreteProgram:
    """Matrices of the finite-dimensional screening program on a lattice."""

    axes: tuple
    Gx: sp.csr_matrix
    Gy: sp.csr_matrix
    Avg: sp.csr_matrix
    centroids: np.ndarray
    wf: np.ndarray
    U0: np.ndarray
    Dxx: sp.csr_matrix
    Dyy: sp.csr_matrix
    D11: sp.csr_matrix
    D1m: sp.csr_matrix
    Hxy: sp.csr_matrix
    h: tuple
    cost: _UtilityUnitCost
    Mono: sp.csr_matrix = field(default=None)

    @property
    def n(self) -> int:
        return self.Gx.shape[1]

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def linear_coef(self) -> np.ndarray:
        th = self.centroids
        return (self.wf * th[:, 0]) @ self.Gx + (self.wf * th[:, 1]) @ self.Gy - self.wf @ self.Avg

    def objective(self, U: np.ndarray) -> float:
        """Expected profit of the nodal utilities ``U`` (flattened, C order)."""
        gx, gy = self.Gx @ U, self.Gy @ U
        y = np.stack([gx, gy], axis=1)
        return float(self.linear_coef() @ U - self.wf @ self.cost.value(y))

    def hessians(self, U: np.ndarray):
        """Scaled second differences (Hxx, Hyy, Hxy) at interior nodes."""
        h1, h2 = self.h
        return self.Dxx @ U / h1 ** 2, self.Dyy @ U / h2 ** 2, self.Hxy @ U

    def convexity_residual(self, U: np.ndarray) -> float:
        """Largest violation of the discrete convexity constraints."""
        viol = [np.max(-(M @ U), initial=0.0) for M in (self.Dxx, self.Dyy, self.D11, self.D1m)]
        hxx, hyy, hxy = self.hessians(U)
        tr = hxx + hyy
        lam_min = tr / 2 - np.sqrt(((hxx - hyy) / 2) ** 2 + hxy ** 2)
        scale = max(1.0, np.max(np.abs(tr), initial=0.0))
        viol.append(np.max(-lam_min, initial=0.0) / scale)
        return float(max(viol))


def build_program(prim: Primitives, mesh: int, X1=None) -> DiscreteProgram:
    """Assemble the discrete program for two-dimensional types on ``mesh`` nodes per axis."""
    if prim.dim != 2:
        raise NotImplementedError("the lattice solver handles two-dimensional types")
    X1 = np.ones(2) if X1 is None else np.asarray(X1, dtype=float)
    if np.any(X1 <= 0):
        raise ValueError("X1 must be positive for the lattice solver")
    (a1, b1), (a2, b2) = prim.density.bounds
    ax1, ax2 = np.linspace(a1, b1, mesh), np.linspace(a2, b2, mesh)
    h1, h2 = ax1[1] - ax1[0], ax2[1] - ax2[0]
    N1, N2 = mesh, mesh
    idx = np.arange(N1 * N2).reshape(N1, N2)
    I, J = np.meshgrid(np.arange(N1 - 1), np.arange(N2 - 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    n00, n10, n01, n11 = idx[I, J], idx[I + 1, J], idx[I, J + 1], idx[I + 1, J + 1]
    M = len(I)

    def rows(pairs, m=M):
        r = np.concatenate([np.arange(m)] * len(pairs))
        c = np.concatenate([p[0] for p in pairs])
        v = np.concatenate([np.full(m, p[1], dtype=float) for p in pairs])
        return sp.csr_matrix((v, (r, c)), shape=(m, N1 * N2))

    dx_lo, dx_hi = rows([(n10, 1 / h1), (n00, -1 / h1)]), rows([(n11, 1 / h1), (n01, -1 / h1)])
    dy_lo, dy_hi = rows([(n01, 1 / h2), (n00, -1 / h2)]), rows([(n11, 1 / h2), (n10, -1 / h2)])
    third = 1.0 / 3.0
    tris = [  # (gx, gy, average, centroid offset in cell units)
        (dx_lo, dy_lo, rows([(n00, third), (n10, third), (n01, third)]), (1 / 3, 1 / 3)),
        (dx_hi, dy_hi, rows([(n11, third), (n10, third), (n01, third)]), (2 / 3, 2 / 3)),
        (dx_lo, dy_hi, rows([(n00, third), (n10, third), (n11, third)]), (2 / 3, 1 / 3)),
        (dx_hi, dy_lo, rows([(n00, third), (n01, third), (n11, third)]), (1 / 3, 2 / 3)),
    ]
    Gx = sp.vstack([t[0] for t in tris]).tocsr()
    Gy = sp.vstack([t[1] for t in tris]).tocsr()
    Avg = sp.vstack([t[2] for t in tris]).tocsr()
    cen = np.vstack([np.c_[ax1[I] + t[3][0] * h1, ax2[J] + t[3][1] * h2] for t in tris])
    f = prim.density.pdf(cen)
    wf = np.full(len(cen), h1 * h2 / 4) * f

    nodes = np.stack(np.meshgrid(ax1, ax2, indexing="ij"), axis=-1).reshape(-1, 2)
    U0 = prim.U0(nodes, X1 if prim.utility.variant != "linear" else None)

    Ii, Jj = np.meshgrid(np.arange(1, N1 - 1), np.arange(1, N2 - 1), indexing="ij")
    Ii, Jj = Ii.ravel(), Jj.ravel()
    K = len(Ii)

    def sd(pairs):
        r = np.concatenate([np.arange(K)] * len(pairs))
        c = np.concatenate([idx[Ii + di, Jj + dj] for di, dj, _ in pairs])
        v = np.concatenate([np.full(K, val, dtype=float) for *_, val in pairs])
        return sp.csr_matrix((v, (r, c)), shape=(K, N1 * N2))

    Dxx = sd([(1, 0, 1), (-1, 0, 1), (0, 0, -2)])
    Dyy = sd([(0, 1, 1), (0, -1, 1), (0, 0, -2)])
    D11 = sd([(1, 1, 1), (-1, -1, 1), (0, 0, -2)])
    D1m = sd([(1, -1, 1), (-1, 1, 1), (0, 0, -2)])
    Hxy = ((D11 - D1m) / (4 * h1 * h2)).tocsr()
    # forward differences along each axis (every triangle gradient component)
    Ia, Ja = np.meshgrid(np.arange(N1 - 1), np.arange(N2), indexing="ij")
    Ib, Jb = np.meshgrid(np.arange(N1), np.arange(N2 - 1), indexing="ij")
    ma, mb = Ia.size, Ib.size
    Mono = sp.vstack([
        sp.csr_matrix((np.r_[np.ones(ma), -np.ones(ma)],
                       (np.r_[np.arange(ma), np.arange(ma)], np.r_[idx[Ia + 1, Ja].ravel(), idx[Ia, Ja].ravel()])),
                      shape=(ma, N1 * N2)),
        sp.csr_matrix((np.r_[np.ones(mb), -np.ones(mb)],
                       (np.r_[np.arange(mb), np.arange(mb)], np.r_[idx[Ib, Jb + 1].ravel(), idx[Ib, Jb].ravel()])),
                      shape=(mb, N1 * N2)),
    ]).tocsr()
    return DiscreteProgram((ax1, ax2), Gx, Gy, Avg, cen, wf, U0, Dxx, Dyy, D11, D1m, Hxy, (h1, h2),
                           _UtilityUnitCost(prim, X1), Mono)


def solve_program(prog: DiscreteProgram, cfg: SolverConfig) -> tuple[np.ndarray, dict]:
    """Solve the discrete program with cvxpy; returns nodal ``U`` and solver info."""
    import cvxpy as cp

    U = cp.Variable(prog.n)
    gx, gy = prog.Gx @ U, prog.Gy @ U
    obj = prog.linear_coef() @ U - prog.cost.cvx(gx, gy, prog.wf)
    hxx, hyy, hxy = prog.Dxx @ U, prog.Dyy @ U, prog.Hxy @ U
    h1, h2 = prog.h
    hxx, hyy = hxx / h1 ** 2, hyy / h2 ** 2
    cons = [
        U >= prog.U0,
        prog.Mono @ U >= 0,
        prog.Dxx @ U >= 0,
        prog.Dyy @ U >= 0,
        prog.D11 @ U >= 0,
        prog.D1m @ U >= 0,
        cp.SOC(hxx + hyy, cp.vstack([hxx - hyy, 2 * hxy])),
    ]
    problem = cp.Problem(cp.Maximize(obj), cons)
    opts = {}
    if cfg.solver == "CLARABEL":
        opts = dict(tol_feas=cfg.tol, tol_gap_abs=cfg.tol, tol_gap_rel=cfg.tol, max_iter=cfg.max_iter)
    t0 = time.perf_counter()
    try:
        problem.solve(solver=cfg.solver, **opts)
    except cp.error.SolverError as exc:  # pragma: no cover - solver-specific failure
        raise SolverError(f"conic solver failed: {exc}", best=U.value) from exc
    info = {"status": problem.status, "solve_time": time.perf_counter() - t0, "iterations": None}
    stats = problem.solver_stats
    if stats is not None:
        info["iterations"] = stats.num_iters
    if problem.status not in ("optimal", "optimal_inaccurate") or U.value is None:
        raise SolverError(f"solver returned status {problem.status}", best=U.value, diagnostics=info)
    if problem.status == "optimal_inaccurate":
        warnings.warn("conic solver reported an inaccurate optimum", RuntimeWarning)
    return np.asarray(U.value), info


def solve_generic_oracle(prog: DiscreteProgram, x0=None, maxiter: int = 2000) -> tuple[np.ndarray, float]:
    """Independent solve of the same program with scipy's SLSQP.

    The second-order cone is written as the polynomial inequality
    ``Hxx Hyy - Hxy^2 >= 0`` together with nonnegative diagonal entries,
    which is equivalent.  Intended for tiny grids only.
    """
    from scipy.optimize import minimize

    n = prog.n
    lin = prog.linear_coef()
    Gx, Gy = prog.Gx.toarray(), prog.Gy.toarray()
    h1, h2 = prog.h
    Dxx, Dyy = prog.Dxx.toarray() / h1 ** 2, prog.Dyy.toarray() / h2 ** 2
    D11, D1m, Hxy = prog.D11.toarray(), prog.D1m.toarray(), prog.Hxy.toarray()
    Mono = prog.Mono.toarray()
    cost = prog.cost

    def negobj(U):
        y = np.stack([Gx @ U, Gy @ U], axis=1)
        return -(lin @ U - prog.wf @ cost.value(y))

    def negjac(U):
        y = np.stack([Gx @ U, Gy @ U], axis=1)
        g = cost.grad(y) * prog.wf[:, None]
        return -(lin - Gx.T @ g[:, 0] - Gy.T @ g[:, 1])

    lin_ineq = np.vstack([np.eye(n), Mono, Dxx, Dyy, D11, D1m])
    rhs = np.concatenate([prog.U0, np.zeros(len(lin_ineq) - n)])

    def det_con(U):
        return (Dxx @ U) * (Dyy @ U) - (Hxy @ U) ** 2

    def det_jac(U):
        a, b, c = Dxx @ U, Dyy @ U, Hxy @ U
        return Dxx * b[:, None] + Dyy * a[:, None] - 2 * Hxy * c[:, None]

    cons = [
        {"type": "ineq", "fun": lambda U: lin_ineq @ U - rhs, "jac": lambda U: lin_ineq},
        {"type": "ineq", "fun": det_con, "jac": det_jac},
    ]
    if x0 is None:
        # a strictly feasible convex start: a small quadratic bowl above U0
        th = np.stack(np.meshgrid(*prog.axes, indexing="ij"), axis=-1).reshape(-1, 2)
        x0 = prog.U0 + 0.05 * np.sum(th ** 2, axis=1) + 0.01
    res = minimize(negobj, x0, jac=negjac, constraints=cons, method="SLSQP",
                   options={"maxiter": maxiter, "ftol": 1e-14})
    return res.x, -res.fun


# ---------------------------------------------------------------------------
# menu
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Menu:
    """Solved mechanism on the type lattice.

    Arrays are indexed ``[i, j]`` for the node ``(axes[0][i], axes[1][j])``;
    vector fields carry a trailing dimension of size ``J``.
    """

    axes: tuple
    U: np.ndarray
    U0: np.ndarray
    y: np.ndarray            # gradient of U in utility units
    rho: np.ndarray          # allocation
    price: np.ndarray        # price paid by each node's type for its choice
    labels: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray         # NaN away from the boundary
    nu: np.ndarray
    profit: np.ndarray
    surplus: np.ndarray
    objective: float
    info: dict
    X1: np.ndarray
    flags: dict = field(default_factory=dict)

    @property
    def nodes(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def h(self) -> tuple:
        return tuple(a[1] - a[0] for a in self.axes)


def _node_gradient(U, axes):
    g = np.gradient(U, *axes, edge_order=2)
    return np.stack(g, axis=-1)


def _node_hessian(U, axes):
    gx, gy = np.gradient(U, *axes, edge_order=2)
    hxx, hxy1 = np.gradient(gx, *axes, edge_order=2)
    hxy2, hyy = np.gradient(gy, *axes, edge_order=2)
    return hxx, hyy, 0.5 * (hxy1 + hxy2)


def solve_equilibrium(prim: Primitives, cfg: SolverConfig | None = None, X1=None) -> Menu:
    """Maximize expected profit over convex indirect utilities above the reservation level.

    Parameters
    ----------
    prim : Primitives
        Two-dimensional primitives with a quadratic cost.
    cfg : SolverConfig, optional
    X1 : array_like, optional
        Covariate vector that scales the utility of each good (bilinear and
        nonlinear variants).  Defaults to ones.

    Returns
    -------
    Menu
    """
    cfg = cfg or SolverConfig()
    if prim.P0 < float(prim.cost.value(prim.q0)[0]):
        raise ValueError("infeasible primitives: P0 < C(q0)")
    prog = build_program(prim, cfg.mesh, X1)
    Uflat, info = solve_program(prog, cfg)
    info["objective"] = prog.objective(Uflat)
    info["convexity_residual"] = prog.convexity_residual(Uflat)
    info["participation_gap"] = float(np.min(Uflat - prog.U0))
    return assemble_menu(prim, prog, Uflat, cfg, info)


def assemble_menu(prim: Primitives, prog: DiscreteProgram, Uflat, cfg: SolverConfig, info=None) -> Menu:
    """Derive allocation, prices, labels and residual fields from nodal utilities."""
    info = dict(info or {})
    shape = prog.shape
    U = np.asarray(Uflat, dtype=float).reshape(shape)
    U0 = prog.U0.reshape(shape)
    X1 = prog.cost.X1
    y = np.maximum(_node_gradient(U, prog.axes), 0.0)
    nodes = np.stack(np.meshgrid(*prog.axes, indexing="ij"), axis=-1)
    provisional = Menu(prog.axes, U, U0, y, np.zeros_like(y), np.zeros(shape), np.zeros(shape, int),
                       np.zeros(shape), np.full(shape, np.nan), np.zeros_like(y), np.zeros(shape),
                       np.zeros(shape), info.get("objective", np.nan), info, X1)
    labels, flags = classify_regions(provisional, cfg, return_flags=True)
    excl = labels == 0
    y[excl] = prog.cost.prim.utility.v(prim.q0) * X1
    U = np.where(excl, U0, U)
    rho = prog.cost.q_of_y(y.reshape(-1, 2)).reshape(y.shape)
    rho[excl] = prim.q0
    gross = np.sum(nodes * y, axis=-1)
    price = gross - U
    price[excl] = prim.P0
    cost = prim.cost.value(rho.reshape(-1, 2)).reshape(shape)
    profit = price - cost
    surplus = gross - cost
    menu = Menu(prog.axes, U, U0, y, rho, price, labels, np.zeros(shape), np.full(shape, np.nan),
                np.zeros_like(y), profit, surplus, info.get("objective", np.nan), info, X1, flags)
    a, one_sided = residual_alpha(menu, prim, return_flags=True)
    b, corner = residual_beta(menu, prim, return_flags=True)
    nu = distortion(menu, prim)
    flags = dict(flags, alpha_one_sided=one_sided, beta_corner=corner)
    return Menu(prog.axes, U, U0, y, rho, price, labels, a, b, nu, profit, surplus,
                info.get("objective", np.nan), info, X1, flags)


# ---------------------------------------------------------------------------
# regions and residuals
# ---------------------------------------------------------------------------
def classify_regions(menu: Menu, cfg: SolverConfig | None = None, return_flags: bool = False):
    """Label nodes 0 (excluded), 1 (bunched) or 2 (screened).

    A node is excluded when ``U - U0 <= gap_tol``.  Among participants the
    discrete Hessian's smallest eigenvalue is compared with ``bunch_tol``
    times the median smallest eigenvalue over screened nodes (one refinement
    pass starting from the median largest eigenvalue); nodes below the
    threshold are bunched.  Nodes within a factor of ten of either
    threshold are flagged as ambiguous and a
    :class:`ClassificationUnstableWarning` is issued when they exceed
    ``ambiguity_frac`` of the grid.
    """
    cfg = cfg or SolverConfig()
    gap = menu.U - menu.U0
    hxx, hyy, hxy = _node_hessian(menu.U, menu.axes)
    half_tr = (hxx + hyy) / 2
    rad = np.sqrt(((hxx - hyy) / 2) ** 2 + hxy ** 2)
    lmin, lmax = half_tr - rad, half_tr + rad
    part = gap > cfg.gap_tol
    labels = np.zeros(gap.shape, dtype=int)
    if np.any(part):
        pos = lmax[part][lmax[part] > 0]
        ref = np.median(pos) if pos.size else 1.0
        thr = cfg.bunch_tol * ref
        screened = part & (lmin >= thr)
        if np.any(screened):
            thr = cfg.bunch_tol * np.median(lmin[screened])
        labels[part] = np.where(lmin[part] >= thr, 2, 1)
    else:
        thr = np.nan
    amb_gap = (gap > cfg.gap_tol / 10) & (gap < cfg.gap_tol * 10)
    amb_h = part & np.isfinite(thr) & (lmin > thr / 10) & (lmin < thr * 10)
    ambiguous = amb_gap | amb_h
    frac = float(ambiguous.mean())
    if frac > cfg.ambiguity_frac:
        warnings.warn(f"classification unstable: {frac:.1%} of nodes are ambiguous", ClassificationUnstableWarning)
    flags = {"ambiguous": ambiguous, "ambiguous_fraction": frac, "eig_threshold": thr, "lambda_min": lmin}
    return (labels, flags) if return_flags else labels


def distortion(menu: Menu, prim: Primitives) -> np.ndarray:
    """Marginal distortion ``nu = f (theta - grad C~(y))`` at the nodes."""
    nodes = menu.nodes
    f = prim.density.pdf(nodes.reshape(-1, 2)).reshape(nodes.shape[:-1])
    cost = _UtilityUnitCost(prim, np.asarray(menu.X1, dtype=float))
    gC = cost.grad(menu.y.reshape(-1, 2)).reshape(menu.y.shape)
    return f[..., None] * (nodes - gC)


def residual_alpha(menu: Menu, prim: Primitives, convention: str = "loss", return_flags: bool = False):
    """Interior residual density of the optimality measure.

    ``convention="loss"`` returns ``f + div nu``, the marginal loss of
    raising utility at a node (3 on the excluded triangle of the uniform
    example).  ``convention="gain"`` returns its negative.  Divergences use
    centered differences in the interior and one-sided differences on the
    boundary; the latter nodes are flagged.
    """
    if convention not in ("loss", "gain"):
        raise ValueError("convention must be 'loss' or 'gain'")
    nu = distortion(menu, prim)
    f = prim.density.pdf(menu.nodes.reshape(-1, 2)).reshape(menu.U.shape)
    div = np.gradient(nu[..., 0], menu.axes[0], axis=0, edge_order=2) + \
        np.gradient(nu[..., 1], menu.axes[1], axis=1, edge_order=2)
    a = f + div
    if convention == "gain":
        a = -a
    one_sided = np.zeros(a.shape, dtype=bool)
    one_sided[[0, -1], :] = True
    one_sided[:, [0, -1]] = True
    return (a, one_sided) if return_flags else a


def outward_normals(shape) -> tuple[np.ndarray, np.ndarray]:
    """Outward unit normals on the boundary of a rectangular lattice and a corner mask."""
    n = np.zeros(tuple(shape) + (2,))
    n[0, :, 0] -= 1
    n[-1, :, 0] += 1
    n[:, 0, 1] -= 1
    n[:, -1, 1] += 1
    norm = np.linalg.norm(n, axis=-1)
    corner = norm > 1.0 + 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm[..., None] > 0, n / norm[..., None], 0.0)
    return n, corner


def residual_beta(menu: Menu, prim: Primitives, return_flags: bool = False):
    """Boundary residual ``beta = -nu . n`` (NaN off the boundary); corners use averaged normals."""
    nu = distortion(menu, prim)
    n, corner = outward_normals(menu.U.shape)
    onb = np.linalg.norm(n, axis=-1) > 0
    b = np.where(onb, -np.sum(nu * n, axis=-1), np.nan)
    return (b, corner) if return_flags else b


@dataclass(frozen=True)
class SweepReport:
    """Per-bunch balance of the optimality measure."""

    bunches: list
    max_abs_residual: float

    @property
    def empty(self) -> bool:
        return len(self.bunches) == 0


def sweep_check(menu: Menu, prim: Primitives) -> SweepReport:
    """Balance ``int alpha + sum beta`` and first moments over each bunch.

    Bunches are the connected components of bunched nodes.  Interior
    integrals use trapezoidal node weights and boundary sums use the
    boundary arc-length weights of the nodes.
    """
    labels = menu.labels
    comp, ncomp = ndimage.label(labels == 1)
    if ncomp == 0:
        return SweepReport([], 0.0)
    from .grids import tensor_weights, trapezoid_weights

    w_int = tensor_weights(menu.axes)
    w1, w2 = trapezoid_weights(menu.axes[0]), trapezoid_weights(menu.axes[1])
    w_bd = np.zeros(labels.shape)
    w_bd[0, :] += w2
    w_bd[-1, :] += w2
    w_bd[:, 0] += w1
    w_bd[:, -1] += w1
    beta = np.nan_to_num(menu.beta)
    nodes = menu.nodes
    out = []
    for k in range(1, ncomp + 1):
        m = comp == k
        mass = float(np.sum(menu.alpha[m] * w_int[m]) + np.sum(beta[m] * w_bd[m]))
        mom = np.sum((menu.alpha * w_int + beta * w_bd)[m][:, None] * nodes[m], axis=0)
        out.append({"id": k, "nodes": int(m.sum()), "residual": mass, "moment": mom,
                    "size": float(np.sum(w_int[m]))})
    return SweepReport(out, float(max(abs(b["residual"]) for b in out)))


# ---------------------------------------------------------------------------
# boundary summaries
# ---------------------------------------------------------------------------
def exclusion_boundary(menu: Menu) -> dict:
    """Summaries of the excluded/participating interface.

    Returns the interface points (midpoints of lattice edges joining an
    excluded and a participating node), their ``tau = theta_1 + theta_2``
    values, the diagonal crossing and the excluded mass.
    """
    lab = menu.labels
    nodes = menu.nodes
    pts = []
    for axis in (0, 1):
        a = np.take(lab, range(lab.shape[axis] - 1), axis=axis)
        b = np.take(lab, range(1, lab.shape[axis]), axis=axis)
        pa = np.take(nodes, range(lab.shape[axis] - 1), axis=axis)
        pb = np.take(nodes, range(1, lab.shape[axis]), axis=axis)
        cross = (a == 0) != (b == 0)
        pts.append(((pa + pb) / 2)[cross])
    pts = np.concatenate(pts) if pts else np.zeros((0, 2))
    tau = pts.sum(axis=1)
    diag = np.diagonal(lab)
    dnodes = np.diagonal(nodes, axis1=0, axis2=1).T
    tau_diag = np.nan
    if lab.shape[0] == lab.shape[1] and np.any(diag == 0) and np.any(diag != 0):
        k = int(np.argmax(diag != 0))
        if k > 0:
            tau_diag = float((dnodes[k - 1].sum() + dnodes[k].sum()) / 2)
    from .grids import tensor_weights

    mass = float(np.sum(tensor_weights(menu.axes) * (lab == 0)))
    return {"points": pts, "tau": tau, "tau_diagonal": tau_diag, "excluded_mass": mass}


def tau1_numeric(menu: Menu) -> float:
    """First diagonal ``tau`` above the exclusion boundary where screening starts.

    NaN when no bunched node lies on the diagonal.
    """
    lab = np.diagonal(menu.labels)
    d = np.diagonal(menu.nodes, axis1=0, axis2=1).T.sum(axis=1)
    part = np.nonzero(lab != 0)[0]
    if part.size == 0 or lab[part[0]] != 1:
        return float("nan")
    k = part[0]
    while k < len(lab) and lab[k] == 1:
        k += 1
    return float(d[k - 1]) if k == len(lab) else float((d[k - 1] + d[k]) / 2)


def bunching_flat_fit(menu: Menu) -> dict:
    """Total-least-squares line through the allocations of bunched nodes.

    ``r2`` is one minus the ratio of the smallest to the total variance of
    the centered allocations, i.e. the share of scatter explained by the flat.
    """
    q = menu.rho[menu.labels == 1]
    if len(q) < 3:
        return {"r2": float("nan"), "normal": np.full(2, np.nan), "count": len(q)}
    qc = q - q.mean(axis=0)
    ev, evec = np.linalg.eigh(qc.T @ qc)
    tot = ev.sum()
    r2 = 1.0 - ev[0] / tot if tot > 0 else 1.0
    return {"r2": float(r2), "normal": evec[:, 0], "count": len(q), "centre": q.mean(axis=0)}
