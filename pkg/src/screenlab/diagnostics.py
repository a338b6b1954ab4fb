"""Over-identification, rationalizability, deconvolution and non-identification checks.

* :func:`transport_overid` couples choices with types by discrete optimal
  transport and measures how far the induced map is from known pairings.
* :func:`rationalizability_check` evaluates the testable conditions of the
  three model classes on a dataset and returns one verdict per condition.
* :func:`kotlarski_deconv` separates a market-level multiplicative shifter
  from individual types using two records per market.
* :func:`lemma2_witness` builds two power-utility structures that induce
  the same truncated choice density.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .ident_bunching import AmbiguousFlatsError, detect_bunching_set
from .ident_linear import TooFewRecordsError, estimate_density_high, recover_cost_pde, recover_types_linear
from .ident_nonlinear import (FixedPointError, LeftSupportError, NonConvergenceError, find_fixed_point,
                              mesh_interpolator, recover_cost_nonlinear, recover_type_field, regime_pair)
from .pde import SingularWeightError
from .pricefit import InsufficientSupportError, fit_price_field
from .quantiles import QuantileMap
from .simulate import Dataset, SeparableGenerator


class MarginalMismatchError(ValueError):
    pass


class InfeasibleAssignmentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimal transport
# ---------------------------------------------------------------------------
@dataclass
class TransportPlan:
    """Discrete coupling of choice atoms (rows) with type atoms (columns).

    Attributes
    ----------
    L : (n, m) array
        Coupling; rows sum to ``a`` and columns to ``b``.
    choices, types : arrays
        Atom locations.
    a, b : arrays
        Choice and type marginals.
    objective : float
        ``sum L_ik theta_k . q_i``.
    T : (n, J) array
        Barycentric image of each choice atom, ``sum_k L_ik theta_k / a_i``.
    potential : (n,) array
        Values of a convex function whose subgradient at ``choices[i]`` is
        ``T[i]`` (when ``monotone``).
    monotone : bool
        Whether the pairs ``(choices, T)`` are cyclically monotone, which
        is what makes ``potential`` exist.
    method : str
        ``"assignment"`` or ``"sinkhorn"``.
    eps : float
        Entropic regularization (0 for the assignment).
    """

    L: np.ndarray
    choices: np.ndarray
    types: np.ndarray
    a: np.ndarray
    b: np.ndarray
    objective: float
    T: np.ndarray
    potential: np.ndarray
    monotone: bool
    method: str
    eps: float = 0.0
    info: dict = field(default_factory=dict)

    def potential_at(self, q) -> np.ndarray:
        """Convex potential ``max_i potential_i + T_i . (q - q_i)``."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        vals = self.potential[None, :] + q @ self.T.T - np.sum(self.T * self.choices, axis=1)[None, :]
        return vals.max(axis=1)

    def map(self, q) -> np.ndarray:
        """Subgradient of the potential at ``q`` (the supporting affine piece)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        vals = self.potential[None, :] + q @ self.T.T - np.sum(self.T * self.choices, axis=1)[None, :]
        return self.T[np.argmax(vals, axis=1)]

    def marginal_errors(self) -> tuple[float, float]:
        return (float(np.max(np.abs(self.L.sum(axis=1) - self.a))),
                float(np.max(np.abs(self.L.sum(axis=0) - self.b))))


def _lse(M, axis):
    m = M.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(M - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn(cost, a, b, eps, tol=1e-6, max_iter=5000, n_scales=8):
    """Log-domain Sinkhorn with geometric eps-scaling; returns the (unrounded) plan.

    ``tol`` bounds the row-marginal error before rounding; exact
    feasibility comes from :func:`round_to_marginals`.
    """
    la, lb = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    scale = max(float(cost.max()), eps)
    its = 0
    for e in np.geomspace(scale, eps, n_scales):
        # intermediate scales only warm-start the duals
        stop = tol if e == eps else max(tol, 1e-3)
        for _ in range(max_iter):
            f = -e * _lse((g[None, :] - cost) / e + lb[None, :], axis=1)
            g = -e * _lse((f[:, None] - cost) / e + la[:, None], axis=0)
            its += 1
            if its % 10 == 0:
                P = np.exp((f[:, None] + g[None, :] - cost) / e + la[:, None] + lb[None, :])
                if np.max(np.abs(P.sum(axis=1) - a)) < stop:
                    break
    P = np.exp((f[:, None] + g[None, :] - cost) / eps + la[:, None] + lb[None, :])
    return P, its


def round_to_marginals(P, a, b) -> np.ndarray:
    """Project a nonnegative matrix onto the couplings of ``a`` and ``b``.

    Scale rows down to at most ``a``, columns down to at most ``b``, then
    add the rank-one correction of the remaining deficits (Altschuler,
    Weed and Rigollet, 2017).
    """
    P = np.asarray(P, dtype=float).copy()
    r = P.sum(axis=1)
    P *= np.minimum(1.0, a / np.where(r > 0, r, 1.0))[:, None]
    c = P.sum(axis=0)
    P *= np.minimum(1.0, b / np.where(c > 0, c, 1.0))[None, :]
    # deficits are nonnegative in exact arithmetic
    er = np.maximum(a - P.sum(axis=1), 0.0)
    ec = np.maximum(b - P.sum(axis=0), 0.0)
    s = er.sum()
    if s > 0:
        P += np.outer(er, ec) / s
    return P


def convex_potential(x, y, max_sweeps: int | None = None, tol: float = 1e-12):
    """Values of a convex function with subgradient ``y_i`` at ``x_i``.

    Longest-path potentials on the complete graph with arc weights
    ``y_j . (x_i - x_j)``; they exist exactly when the pairs are cyclically
    monotone, which is detected by the relaxation failing to settle within
    ``n`` sweeps.

    Returns
    -------
    values : (n,) array
    monotone : bool
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    W = y @ x.T - np.sum(x * y, axis=1)[:, None]      # W[j, i] = y_j . (x_i - x_j)
    phi = np.zeros(n)
    scale = max(float(np.abs(W).max()), 1e-300)
    for _ in range(max_sweeps or n + 1):
        new = np.maximum(phi, (phi[:, None] + W).max(axis=0))
        if np.all(new - phi <= tol * scale):
            return new - new.min(), True
        phi = new
    return phi - phi.min(), False


def sampled_cycles_monotone(x, y, n_cycles: int = 1000, max_len: int = 5, seed: int = 0,
                            tol: float = 1e-10) -> bool:
    """Check cyclical monotonicity of ``(x_i, y_i)`` on randomly drawn cycles."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    scale = max(float(np.abs(x).max() * np.abs(y).max()), 1e-300)
    for _ in range(n_cycles):
        k = int(rng.integers(2, max_len + 1))
        idx = rng.choice(len(x), size=min(k, len(x)), replace=False)
        own = np.sum(x[idx] * y[idx])
        shifted = np.sum(x[idx] * y[np.roll(idx, -1)])
        if shifted > own + tol * scale * len(idx):
            return False
    return True


def transport_overid(choices, types, a=None, b=None, known_types=None, max_exact: int = 2000,
                     eps_scale: float = 1e-3, tol: float = 1e-9, check_monotone: bool = True):
    """Optimal coupling of choices and types and the over-identification statistic.

    Maximizes ``E[theta . q]`` over couplings with the given marginals.
    Equal uniform marginals with at most ``max_exact`` atoms per side are
    solved exactly as a linear assignment; otherwise entropic transport with
    ``eps = eps_scale * mean squared distance / 2`` is solved and rounded
    onto the feasible couplings.

    Parameters
    ----------
    choices : (n, J) array
    types : (m, J) array
    a, b : arrays, optional
        Marginal weights (uniform by default).
    known_types : (n, J) array, optional
        Type behind each choice under the allocation being tested.  When
        given, the statistic is the mean squared gap between the transport
        image and these types, divided by the type variance.

    Returns
    -------
    plan : TransportPlan
    statistic : float
        NaN without ``known_types``.

    Raises
    ------
    MarginalMismatchError
        Marginals have different totals or negative entries.
    InfeasibleAssignmentError
        Empty or non-finite inputs.
    """
    Q = np.atleast_2d(np.asarray(choices, dtype=float))
    TH = np.atleast_2d(np.asarray(types, dtype=float))
    n, m = len(Q), len(TH)
    if n == 0 or m == 0 or Q.shape[1] != TH.shape[1]:
        raise InfeasibleAssignmentError("need nonempty atom sets of equal dimension")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(TH))):
        raise InfeasibleAssignmentError("atoms must be finite")
    uniform = a is None and b is None
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=float)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise MarginalMismatchError("marginal weights must be nonnegative")
    if abs(a.sum() - b.sum()) > tol:
        raise MarginalMismatchError(f"marginal totals differ: {a.sum():.12g} vs {b.sum():.12g}")
    gain = Q @ TH.T
    if uniform and n == m and n <= max_exact:
        rows, cols = linear_sum_assignment(gain, maximize=True)
        L = np.zeros((n, m))
        L[rows, cols] = 1.0 / n
        method, eps, info = "assignment", 0.0, {}
    else:
        cost = 0.5 * (np.sum(Q ** 2, axis=1)[:, None] + np.sum(TH ** 2, axis=1)[None, :]) - gain
        cost = np.maximum(cost, 0.0)
        eps = eps_scale * float(cost.mean())
        P, its = _sinkhorn(cost, a, b, eps)
        L = round_to_marginals(P, a, b)
        method, info = "sinkhorn", {"iterations": its}
    T = (L @ TH) / a[:, None]
    if check_monotone:
        pot, mono = convex_potential(Q, T, max_sweeps=min(n + 1, 500))
    else:
        pot, mono = np.zeros(n), False
    plan = TransportPlan(L, Q, TH, a, b, float(np.sum(L * gain)), T, pot, mono, method, eps, info)
    stat = overid_statistic(plan, known_types) if known_types is not None else np.nan
    return plan, stat


def overid_statistic(plan: TransportPlan, known_types) -> float:
    """Mean squared gap between the transport image and the known types, relative to the type variance."""
    K = np.atleast_2d(np.asarray(known_types, dtype=float))
    var = float(np.mean(np.sum((plan.types - plan.types.mean(axis=0)) ** 2, axis=1)))
    return float(np.mean(np.sum((plan.T - K) ** 2, axis=1)) / max(var, 1e-300))


def calibrate_threshold(replicate, n_reps: int = 30, seed: int = 0, k_sd: float = 3.0):
    """Threshold ``mean + k_sd * sd`` of a statistic over model-generated replications.

    ``replicate(rng)`` returns one statistic computed on data drawn under
    the null.  Returns the threshold and the replicated statistics.
    """
    rng = np.random.default_rng(seed)
    stats = np.array([replicate(rng) for _ in range(n_reps)])
    return float(stats.mean() + k_sd * stats.std(ddof=1)), stats


def swap_allocations(choices, share: float = 0.1, seed: int = 0) -> np.ndarray:
    """Permute the choices of a random ``share`` of records among themselves (a derangement)."""
    q = np.array(choices, dtype=float)
    rng = np.random.default_rng(seed)
    k = max(2, int(round(share * len(q))))
    idx = rng.choice(len(q), size=k, replace=False)
    q[idx] = q[np.roll(idx, 1)]
    return q


# ---------------------------------------------------------------------------
# rationalizability
# ---------------------------------------------------------------------------
CONDITIONS = {"M1": ("C1", "C2", "C3", "C4", "C5"),
              "M2": ("C1", "C2", "C3", "C4", "C5"),
              "M3": ("C1", "C2", "C3", "C4'", "C5", "C6")}

DEFAULT_TOLERANCES = {"C1": 0.05, "C2": 0.999, "C3": 0.05, "C4": 0.05, "C4'": 0.05, "C5": 1e-3, "C6": 0.05}


@dataclass
class ConditionVerdict:
    """One condition: statistic, tolerance and whether the statistic is within it.

    ``sense`` is ``"<="`` for statistics that must stay below the tolerance
    and ``">="`` for those that must reach it.
    """

    name: str
    statistic: float
    tolerance: float
    sense: str = "<="
    locations: list = field(default_factory=list)
    note: str = ""

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.statistic):
            return False
        return self.statistic <= self.tolerance if self.sense == "<=" else self.statistic >= self.tolerance


@dataclass
class RationalizabilityReport:
    model_class: str
    verdicts: dict

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts.values())

    def __getitem__(self, name) -> ConditionVerdict:
        return self.verdicts[name]

    def to_text(self) -> str:
        """Structured text: one ``condition statistic sense tolerance verdict locations`` line per condition."""
        lines = [f"# model_class {self.model_class}", "# condition\tstatistic\tsense\ttolerance\tverdict\tlocations\tnote"]
        for v in self.verdicts.values():
            loc = ";".join(",".join(f"{x:.6g}" for x in np.atleast_1d(l)) for l in v.locations[:10])
            lines.append(f"{v.name}\t{v.statistic:.10g}\t{v.sense}\t{v.tolerance:.10g}\t"
                         f"{'pass' if v.passed else 'fail'}\t{loc or '-'}\t{v.note or '-'}")
        return "\n".join(lines) + "\n"


def _cells(ds: Dataset, max_cells: int):
    """Group records by exact covariate values."""
    cov = np.hstack([ds.X1, ds.X2])
    keys, inv = np.unique(cov, axis=0, return_inverse=True)
    if len(keys) > max_cells:
        raise ValueError(f"{len(keys)} distinct covariate cells; the checks need at most {max_cells} discrete cells")
    return [inv.reshape(-1) == k for k in range(len(keys))], keys


def price_spread(ds: Dataset):
    """Price gap to the nearest other record in standardized (q, X) space within each regime, over the price scale."""
    feats = np.hstack([ds.q, ds.X1, ds.X2])
    sd = feats.std(axis=0)
    feats = feats[:, sd > 0] / sd[sd > 0]
    pscale = float(np.std(ds.p))
    out = np.zeros(ds.n)
    for z in np.unique(ds.z):
        idx = np.nonzero(ds.z == z)[0]
        if len(idx) < 2:
            continue
        # order by (features, price) so that exact ties resolve independently of record order
        order = np.lexsort(np.vstack([ds.p[idx], feats[idx].T[::-1]]))
        idx = idx[order]
        _, nn = cKDTree(feats[idx]).query(feats[idx], k=2)
        out[idx] = np.abs(ds.p[idx] - ds.p[idx[nn[:, 1]]])
    return out / max(pscale, 1e-300)


def _c1(ds, tol):
    d = price_spread(ds)
    worst = np.argsort(d)[::-1][:10]
    return ConditionVerdict("C1", float(np.median(d)), tol, "<=", [ds.q[i] for i in worst if d[i] > tol],
                            "median nearest-neighbour price gap over the price scale")


def _c2(parts, q0, tol):
    best, locs, notes = np.inf, [], []
    for label, sub in parts:
        try:
            geom = detect_bunching_set(sub, q0=q0, r2_min=tol, allow_multiple=True)
        except NotImplementedError as exc:
            return ConditionVerdict("C2", np.nan, tol, ">=", [], str(exc))
        except AmbiguousFlatsError as exc:
            geom = None
            notes.append(f"{label}: {exc}")
        r2 = max((f.r2 for f in geom.flats), default=0.0) if geom is not None else 0.0
        if r2 < best:
            best = r2
        if geom is None or geom.empty:
            notes.append(f"{label}: no flat")
        else:
            locs.extend(f.origin for f in geom.flats)
    return ConditionVerdict("C2", float(best), tol, ">=", locs, "; ".join(notes) or "smallest best-flat R^2 over cells")


def _fit_fields(parts, q0, mesh, seed):
    out = {}
    for label, sub in parts:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out[label] = fit_price_field(sub, q0=q0, mesh=mesh, seed=seed)
        except InsufficientSupportError as exc:
            out[label] = exc
    return out


def _c3(fields, tol, psd: bool = True, grad_tol: float = 1e-8, hess_tol: float = 1e-6):
    """Share of supported lattice nodes failing the shape test.

    With ``psd`` (linear utility, convex price) the test is the fitted
    field's own mask: nonvanishing gradient and positive-semidefinite
    Hessian.  Without it only a nonvanishing gradient and Hessian are
    required, which is all nonlinear utility implies.
    """
    worst, locs = 0.0, []
    for label, pf in fields.items():
        if isinstance(pf, Exception):
            return ConditionVerdict("C3", 1.0, tol, "<=", [], f"{label}: {pf}")
        inside = pf.inside
        if psd:
            bad = inside & ~pf.mask
        else:
            g = np.linalg.norm(np.nan_to_num(pf.mesh_grad), axis=-1)
            h = np.linalg.norm(np.nan_to_num(pf.mesh_hess), axis=(-2, -1))
            gs = max(float(g[inside].max()), 1e-300) if inside.any() else 1.0
            hs = max(float(h[inside].max()), 1e-300) if inside.any() else 1.0
            bad = inside & ((g <= grad_tol * gs) | (h <= hess_tol * hs))
        share = float(bad.sum() / inside.sum()) if inside.any() else 1.0
        if share > worst:
            worst = share
        X = np.stack(np.meshgrid(*pf.mesh_axes, indexing="ij"), axis=-1)
        locs.extend(X[bad][:5])
    what = "vanishing gradient or indefinite Hessian" if psd else "vanishing gradient or Hessian"
    return ConditionVerdict("C3", worst, tol, "<=", locs if worst > tol else [],
                            f"share of supported lattice nodes with {what}")


def _c4_linear(parts, fields, tol, seed, n_probes=400):
    worst, locs = 0.0, []
    types = {}
    for label, sub in parts:
        pf = fields[label]
        if isinstance(pf, Exception) or not pf.mask.any():
            return ConditionVerdict("C4", 1.0, tol, "<=", [], f"{label}: no screened region"), types
        ptf = recover_types_linear(pf, sub)
        types[label] = ptf
        scale = sub.X1[0]
        W = ptf.points / scale
        Qa = sub.q[ptf.attached]
        # record -> nearest lattice node; the choice measure of a preimage is the
        # record mass on the nodes whose gradient lies in the orthant
        idx = np.stack([np.clip(np.rint((Qa[:, j] - a[0]) / (a[1] - a[0])).astype(int), 0, len(a) - 1)
                        for j, a in enumerate(pf.mesh_axes)], axis=1)
        on = pf.mask[tuple(idx.T)]
        W, idx = W[on], idx[on]
        if len(W) < 20:
            return ConditionVerdict("C4", 1.0, tol, "<=", [], f"{label}: too few attached records"), types
        Gn = pf.mesh_grad[tuple(idx.T)] / scale
        # canonical order so that the probe draw does not depend on record order
        order = np.lexsort(W.T[::-1])
        W, Gn = W[order], Gn[order]
        rng = np.random.default_rng(seed)
        probes = W[rng.choice(len(W), size=min(n_probes, len(W)), replace=False)]
        FW = np.array([np.mean(np.all(W <= w, axis=1)) for w in probes])
        Mpre = np.array([np.mean(np.all(Gn <= w, axis=1)) for w in probes])
        gap = np.abs(FW - Mpre)
        if gap.max() > worst:
            worst = float(gap.max())
            locs = [probes[i] for i in np.argsort(gap)[::-1][:5] if gap[i] > tol]
    return ConditionVerdict("C4", worst, tol, "<=", locs,
                            "sup gap between the pseudo-type CDF and the choice mass of its gradient preimage"), types


def _c5_linear(parts, fields, types, q0, tol, bins=50, smooth=1.5):
    worst, notes = 0.0, []
    for label, sub in parts:
        ptf = types.get(label)
        if ptf is None:
            return ConditionVerdict("C5", np.nan, tol, "<=", [], f"{label}: no pseudo-types")
        try:
            dens = estimate_density_high(ptf, bins=bins, smooth=smooth)
            est = recover_cost_pde(ptf, fields[label], dens, q0=q0)
        except (TooFewRecordsError, SingularWeightError, np.linalg.LinAlgError, ValueError) as exc:
            return ConditionVerdict("C5", np.nan, tol, "<=", [], f"{label}: {exc}")
        worst = max(worst, est.pde.residual, est.pde.boundary_residual)
    return ConditionVerdict("C5", float(worst), tol, "<=", [],
                            "relative residual of the discrete cost equation with the outflow closure")


def _quantile_gap(A, B, radii=(0.0, 0.25, 0.5), n_dir=8):
    J = A.shape[1]
    u = [np.zeros(J)]
    ang = np.linspace(0, 2 * np.pi, n_dir, endpoint=False)
    for r in radii:
        if r > 0:
            u.extend(r * np.stack([np.cos(ang), np.sin(ang)], axis=1) if J == 2 else r * np.eye(J))
    u = np.array(u)
    qa = QuantileMap(A).inverse(u)
    qb = QuantileMap(B).inverse(u)
    scale = float(np.median(np.linalg.norm(A, axis=1)))
    gap = np.linalg.norm(qa - qb, axis=1) / scale
    return gap, u


def _check_m3(ds, cell_mask, label, q0, tol, mesh, seed, theta0, n_transport):
    """C3, C4', C5 and C6 for one covariate cell with both regimes."""
    d1 = ds.subset(cell_mask & (ds.z == 1))
    d2 = ds.subset(cell_mask & (ds.z == 2))
    fields = _fit_fields([(f"{label}z1", d1), (f"{label}z2", d2)], q0, mesh, seed)
    c3 = _c3(fields, tol["C3"], psd=False)
    pf1, pf2 = fields[f"{label}z1"], fields[f"{label}z2"]
    fail = lambda name, sense, note: ConditionVerdict(name, np.nan, tol[name], sense, [], note)  # noqa: E731
    if isinstance(pf1, Exception) or isinstance(pf2, Exception):
        return c3, fail("C4'", "<=", "no price field"), fail("C5", "<=", "no price field"), \
            fail("C6", "<=", "no price field")
    try:
        rp = regime_pair(pf1, pf2, seed=seed)
        fp = find_fixed_point(rp)
        J = ds.dim
        tf = recover_type_field(rp, fp, np.ones(J) if theta0 is None else theta0)
    except (FixedPointError, NonConvergenceError, LeftSupportError, ValueError) as exc:
        note = f"{type(exc).__name__}: {exc}"
        return c3, fail("C4'", "<=", note), fail("C5", "<=", note), fail("C6", "<=", note)
    th_i = mesh_interpolator(tf.axes, tf.theta)
    dv_i = mesh_interpolator(tf.axes, tf.dv)
    A = th_i(pf1.q)
    A = A[np.all(np.isfinite(A), axis=1)]
    B = rp.grad2(pf2.q) / dv_i(pf2.q)
    okB = np.all(np.isfinite(B), axis=1)
    Q2, B = pf2.q[okB], B[okB]
    gap, u = _quantile_gap(A, B)
    c4 = ConditionVerdict("C4'", float(gap.max()), tol["C4'"], "<=", [u[i] for i in np.nonzero(gap > tol["C4'"])[0]],
                          "largest gap between the type quantiles recovered in the two regimes, over the type scale")
    res, notes = 0.0, []
    for r, pf, d in ((1, pf1, d1), (2, pf2, d2)):
        try:
            rc = recover_cost_nonlinear(tf, pf, d, r)
            res = max(res, rc.cost.pde.residual)
        except (TooFewRecordsError, SingularWeightError, np.linalg.LinAlgError, ValueError) as exc:
            res = np.nan
            notes.append(f"z{r}: {exc}")
    c5 = ConditionVerdict("C5", float(res), tol["C5"], "<=", [],
                          "; ".join(notes) or "relative residual of the discrete cost equation, polynomial closure")
    # the transport image of each regime's choices must be the type its first-order condition implies
    rng = np.random.default_rng(seed)
    worst = 0.0
    for Qr, Tr in ((pf1.q, th_i(pf1.q)), (Q2, B)):
        ok = np.all(np.isfinite(Tr), axis=1)
        Qr, Tr = Qr[ok], Tr[ok]
        k = min(n_transport, len(Qr) // 2)
        perm = rng.permutation(len(Qr))
        ia, ib = perm[:k], perm[k:2 * k]
        plan, _ = transport_overid(Qr[ia], Tr[ib], check_monotone=False)
        rel = np.linalg.norm(plan.T - Tr[ia], axis=1) / np.linalg.norm(Tr[ia], axis=1)
        worst = max(worst, float(np.median(rel)))
    c6 = ConditionVerdict("C6", worst, tol["C6"], "<=", [],
                          "median relative gap between the transport image and the first-order-condition type")
    return c3, c4, c5, c6


def rationalizability_check(ds: Dataset, model_class: str, q0=None, tolerances: dict | None = None,
                            tolerance_scale: float = 1.0, mesh: int = 41, seed: int = 0, max_cells: int = 16,
                            theta0=None, n_transport: int = 800) -> RationalizabilityReport:
    """Evaluate the rationalizability conditions of a model class.

    Parameters
    ----------
    ds : Dataset
    model_class : {"M1", "M2", "M3"}
        Linear utility, bilinear utility with covariates, nonlinear utility
        with two cost regimes.
    q0 : array, optional
        Outside option.  Defaults to the origin.
    tolerances : dict, optional
        Overrides of :data:`DEFAULT_TOLERANCES`; ``C2`` is a minimum R^2.
    tolerance_scale : float
        Multiplies every ``<=`` tolerance.
    mesh : int
        Lattice size of the price fields.
    max_cells : int
        Largest number of distinct covariate cells accepted.
    theta0 : array, optional
        Anchor type for the nonlinear recovery (M3); the M3 statistics do
        not depend on it.

    Returns
    -------
    RationalizabilityReport
        One verdict per condition of the class; failures are verdicts.

    Raises
    ------
    ValueError
        Unknown class, empty dataset, continuous covariates, or a missing
        regime for M3.
    """
    if model_class not in CONDITIONS:
        raise ValueError(f"unknown model class {model_class!r}")
    if ds.n == 0:
        raise ValueError("dataset is empty")
    tol = dict(DEFAULT_TOLERANCES, **(tolerances or {}))
    for k in tol:
        if k != "C2":
            tol[k] *= tolerance_scale
    q0 = np.zeros(ds.dim) if q0 is None else np.asarray(q0, dtype=float)
    masks, _ = _cells(ds, max_cells)
    v = {"C1": _c1(ds, tol["C1"])}
    if model_class in ("M1", "M2"):
        if model_class == "M1" and not np.allclose(ds.X1, 1.0):
            raise ValueError("M1 data must have unit X1")
        parts = [(f"cell{k}", ds.subset(m)) for k, m in enumerate(masks)]
        v["C2"] = _c2(parts, q0, tol["C2"])
        fields = _fit_fields(parts, q0, mesh, seed)
        v["C3"] = _c3(fields, tol["C3"])
        v["C4"], types = _c4_linear(parts, fields, tol["C4"], seed)
        v["C5"] = _c5_linear(parts, fields, types, q0, tol["C5"])
    else:
        if not {1, 2} <= set(np.unique(ds.z)):
            raise ValueError("M3 checks need records from both cost regimes")
        parts = [(f"cell{k}z{z}", ds.subset(m & (ds.z == z))) for k, m in enumerate(masks) for z in (1, 2)]
        v["C2"] = _c2(parts, q0, tol["C2"])
        worst = {}
        for k, m in enumerate(masks):
            for c in _check_m3(ds, m, f"cell{k}", q0, tol, mesh, seed, theta0, n_transport):
                prev = worst.get(c.name)
                if prev is None or not c.passed or (prev.passed and c.statistic > prev.statistic):
                    worst[c.name] = c
        v.update(worst)
    return RationalizabilityReport(model_class, {name: v[name] for name in CONDITIONS[model_class]})


# ---------------------------------------------------------------------------
# Kotlarski deconvolution
# ---------------------------------------------------------------------------
@dataclass
class DeconvResult:
    """Recovered laws of ``log Y`` and ``log theta`` from paired measurements.

    Attributes
    ----------
    t : array
        Frequencies up to the cutoff.
    ch_pair : array
        Empirical ``E exp(i t X2)`` (joint characteristic function at ``(0, t)``).
    ch_pair_d1 : array
        Empirical ``E[i X1 exp(i t X2)]`` (its first partial derivative).
    ch_x1 : array
        Empirical ``E exp(i t X1)``.
    ch_log_y, ch_log_theta : arrays
        Recovered characteristic functions.
    cutoff : float
        First frequency where ``|ch_pair|`` fell below ``floor`` (``inf``
        if it never did on the scanned range).
    x : array
        Grid for the densities and CDFs.
    pdf_log_y, cdf_log_y, pdf_log_theta, cdf_log_theta : arrays
        Truncated-Fourier estimates.  Densities keep only the positive lobe
        around their mode (the rest is truncation ringing) and are
        renormalized; CDFs are clipped to [0, 1] and made nondecreasing.
    se_log_y : array
        Upper bound on the standard error of ``log ch_log_y``: the integral
        of the pointwise standard errors of the integrand.
    mean_log_y : float
        Mean of the recovered ``log Y`` density.
    n_pairs : int
    split_seed : int
    path : dict
        Integration record: rule, step, number of nodes, scanned range.
    """

    t: np.ndarray
    ch_pair: np.ndarray
    ch_pair_d1: np.ndarray
    ch_x1: np.ndarray
    ch_log_y: np.ndarray
    ch_log_theta: np.ndarray
    cutoff: float
    x: np.ndarray
    pdf_log_y: np.ndarray
    cdf_log_y: np.ndarray
    pdf_log_theta: np.ndarray
    cdf_log_theta: np.ndarray
    mean_log_y: float
    se_log_y: np.ndarray
    n_pairs: int
    split_seed: int
    path: dict = field(default_factory=dict)

    def cdf_y(self, y) -> np.ndarray:
        """CDF of ``Y`` itself."""
        return np.interp(np.log(np.asarray(y, dtype=float)), self.x, self.cdf_log_y, left=0.0, right=1.0)

    def cdf_theta(self, theta) -> np.ndarray:
        return np.interp(np.log(np.asarray(theta, dtype=float)), self.x, self.cdf_log_theta, left=0.0, right=1.0)


def split_pairs(pseudo_types, split_seed: int = 0, coordinate: int = 0):
    """Pair records within each market after a uniformly random split into two halves.

    ``pseudo_types`` has shape ``(n_markets, per_market)`` or
    ``(n_markets, per_market, J)``.  Returns the two log measurements.
    """
    P = np.asarray(pseudo_types, dtype=float)
    if P.ndim == 3:
        P = P[..., coordinate]
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("pseudo-types must be arranged as (markets, records per market) with at least two records")
    if np.any(~(P > 0)):
        raise ValueError("pseudo-types must be strictly positive")
    rng = np.random.default_rng(split_seed)
    order = np.argsort(rng.random(P.shape), axis=1)
    P = np.take_along_axis(P, order, axis=1)
    h = P.shape[1] // 2
    return np.log(P[:, :h]).reshape(-1), np.log(P[:, h:2 * h]).reshape(-1)


def _ecf(t, x, w=None, chunk: int = 64):
    """``mean(w exp(i t x))`` for each ``t``."""
    w = np.ones(len(x)) if w is None else w
    out = np.empty(len(t), dtype=complex)
    for k in range(0, len(t), chunk):
        out[k:k + chunk] = np.exp(1j * np.outer(t[k:k + chunk], x)) @ w / len(x)
    return out


def _invert(t, ch, x, mean):
    """Truncated Fourier density and Gil-Pelaez CDF on ``x``."""
    E = np.exp(-1j * np.outer(x, t)) * ch[None, :]
    pdf = np.trapezoid(E.real, t, axis=1) / np.pi
    with np.errstate(invalid="ignore", divide="ignore"):
        integ = E.imag / np.where(t > 0, t, 1.0)[None, :]
    integ[:, 0] = mean - x                   # limit of Im(exp(-itx) ch(t)) / t at t = 0
    cdf = 0.5 - np.trapezoid(integ, t, axis=1) / np.pi
    # keep the positive lobe around the mode; the side lobes are truncation ringing
    pos = pdf > 0
    k = int(np.argmax(pdf))
    lo = k - int(np.argmin(pos[k::-1])) + 1 if not pos[:k + 1].all() else 0
    hi = k + int(np.argmin(pos[k:])) if not pos[k:].all() else len(x)
    pdf = np.where((np.arange(len(x)) >= lo) & (np.arange(len(x)) < hi), pdf, 0.0)
    mass = np.trapezoid(pdf, x)
    pdf = pdf / mass if mass > 0 else pdf
    cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))
    return pdf, cdf


def kotlarski_deconv(pseudo_types, split_seed: int = 0, coordinate: int = 0, floor: float = 0.05,
                     n_t: int = 2001, t_max: float | None = None, x=None) -> DeconvResult:
    """Recover the law of a market-level shifter ``Y`` and of types from ``Y * theta``.

    With ``X1 = log theta_a + log Y`` and ``X2 = log theta_b + log Y`` for
    two records of one market and ``E log Y = 0``,
    ``Ch_logY(t) = exp(int_0^t Ch_1(0, s) / Ch(0, s) ds - i t E X1)`` and
    ``Ch_logtheta(t) = Ch(t, 0) / Ch_logY(t)``.  The integral is a
    trapezoid rule; everything beyond the first ``t`` where
    ``|Ch(0, t)| < floor`` is set to zero.

    Parameters
    ----------
    pseudo_types : array (n_markets, per_market[, J])
        Strictly positive pseudo-types grouped by market.
    split_seed : int
        Seed of the random within-market split.
    coordinate : int
        Coordinate used when the pseudo-types are vectors.
    floor : float
        Frequency cutoff level.
    n_t : int
        Frequency nodes on the scanned range.
    t_max : float, optional
        Scanned range, default ``60 / sd(X2)``.
    x : array, optional
        Grid for the recovered laws of the logs.

    Raises
    ------
    ValueError
        Nonpositive inputs or fewer than two records per market.
    """
    X1, X2 = split_pairs(pseudo_types, split_seed, coordinate)
    sd = float(np.std(X2))
    if t_max is None:
        t_max = 60.0 / max(sd, 1e-12)
    t_all = np.linspace(0.0, t_max, n_t)
    # scan in blocks and stop at the first crossing of the floor
    ch2, d1 = [], []
    cut = None
    for k in range(0, n_t, 100):
        blk = t_all[k:k + 100]
        c = _ecf(blk, X2)
        ch2.append(c)
        d1.append(1j * _ecf(blk, X2, X1))
        low = np.nonzero(np.abs(c) < floor)[0]
        if len(low):
            cut = k + int(low[0])
            break
    ch2 = np.concatenate(ch2)
    d1 = np.concatenate(d1)
    end = cut if cut is not None else len(ch2)
    t = t_all[:end]
    ch2, d1 = ch2[:end], d1[:end]
    m1 = float(np.mean(X1))
    log_ch = cumulative_trapezoid(d1 / ch2, t, initial=0.0) - 1j * t * m1
    ch_y = np.exp(log_ch)
    # pointwise standard error of the integrand, from the record-level terms
    se = np.empty(len(t))
    ratio = d1 / ch2
    for k in range(0, len(t), 64):
        e = np.exp(1j * np.outer(t[k:k + 64], X2))
        dev = 1j * X1[None, :] * e - ratio[k:k + 64, None] * e
        se[k:k + 64] = np.sqrt(np.mean(np.abs(dev) ** 2, axis=1) / len(X1)) / np.abs(ch2[k:k + 64])
    se_log = cumulative_trapezoid(se, t, initial=0.0)
    ch_x1 = _ecf(t, X1)
    ch_th = ch_x1 / ch_y
    if x is None:
        lo = min(X1.min(), X2.min())
        hi = max(X1.max(), X2.max())
        x = np.linspace(lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo), 1201)
    x = np.asarray(x, dtype=float)
    pdf_y, cdf_y = _invert(t, ch_y, x, 0.0)
    pdf_t, cdf_t = _invert(t, ch_th, x, m1)
    mean_y = float(np.trapezoid(x * pdf_y, x))
    path = {"rule": "trapezoid", "step": float(t[1] - t[0]) if len(t) > 1 else 0.0, "nodes": len(t),
            "scanned_to": float(t_all[min(end, n_t - 1)]), "mean_x1": m1}
    return DeconvResult(t, ch2, d1, ch_x1, ch_y, ch_th, float(t_all[cut]) if cut is not None else np.inf,
                        x, pdf_y, cdf_y, pdf_t, cdf_t, mean_y, se_log, len(X1), int(split_seed), path)


def remix_cdf(res: DeconvResult, x=None) -> np.ndarray:
    """CDF of ``log theta + log Y`` implied by the recovered characteristic functions."""
    x = res.x if x is None else np.asarray(x, dtype=float)
    return _invert(res.t, res.ch_log_theta * res.ch_log_y, x, res.path["mean_x1"])[1]


# ---------------------------------------------------------------------------
# observationally equivalent power-utility structures
# ---------------------------------------------------------------------------
@dataclass
class WitnessReport:
    omega: np.ndarray
    axes: tuple
    m_base: np.ndarray
    m_transformed: np.ndarray
    sup_diff: float
    mismatched: bool


def _uniform_box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    vol = float(np.prod(hi - lo))

    def pdf(th):
        inside = np.all((th >= lo) & (th <= hi), axis=-1)
        return np.where(inside, 1.0 / vol, 0.0)
    return pdf


def _induced_density(gradP, hessP, dv, d2v, pdf):
    """Choice density ``f(theta(q)) |det D theta(q)|`` with ``theta = grad P / v'`` (separable case)."""
    theta = gradP / dv
    dtheta = hessP / dv - gradP * d2v / dv ** 2
    return pdf(theta) * np.abs(np.prod(dtheta, axis=-1))


def lemma2_witness(omega, base_pdf=None, grid: int = 101, exponents=(0.5, 0.7), mismatched: bool = False,
                   margin: float = 0.02) -> WitnessReport:
    """Sup gap between the choice densities of a power-utility structure and its rescaled twin.

    The base structure has utility ``q_j ** e_j`` and type density
    ``base_pdf`` (uniform on the generator's type box by default), with the
    price schedule of :class:`SeparableGenerator`.  The twin scales types by
    ``omega`` (density ``f(t / omega) / prod(omega)``) and divides utility
    by ``omega``.  With ``mismatched`` only the type law is rescaled.

    The lattice covers the choices of types at least ``margin`` (as a share
    of the box width) inside the box, so that every node's type is
    unambiguously in the support.

    Raises
    ------
    ValueError
        ``omega`` outside ``(0, 1]^J``.
    """
    gen = SeparableGenerator(omega=tuple(exponents))
    om = np.asarray(omega, dtype=float)
    if om.shape != (gen.J,) or np.any(om <= 0) or np.any(om > 1):
        raise ValueError("omega must lie in (0, 1]^J")
    pdf = base_pdf or _uniform_box(np.full(gen.J, gen.lo), np.ones(gen.J))
    w = margin * (1 - gen.lo)
    qlo = gen.rho1(np.full(gen.J, gen.lo + w))
    qhi = gen.rho1(np.full(gen.J, 1 - w))
    axes = tuple(np.linspace(qlo[j], qhi[j], grid) for j in range(gen.J))
    Q = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    gP = gen.price_grad(Q, 1)
    hP = gen.price_hess_diag(Q, 1)
    dv, d2v = gen.dv(Q), gen.d2v(Q)
    m = _induced_density(gP, hP, dv, d2v, pdf)

    def pdf_t(th):
        return pdf(th / om) / np.prod(om)
    if mismatched:
        m2 = _induced_density(gP, hP, dv, d2v, pdf_t)
    else:
        m2 = _induced_density(gP, hP, dv / om, d2v / om, pdf_t)
    return WitnessReport(om, axes, m, m2, float(np.max(np.abs(m - m2))), mismatched)
