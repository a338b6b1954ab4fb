"""Identification of the bunched-type density under bilinear utility.

Bunched consumers choose on a straight flat of the choice set.  Along the
flat the price slope equals ``theta . (X1 o e)``, with ``e`` the flat's
direction, so each record reveals one linear projection of its type.  With
covariates spreading the projection directions over the half circle, the
projections are Radon data and the density follows by filtered
back-projection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .pricefit import local_scatter_ratio
from .simulate import Dataset


class AmbiguousFlatsError(ValueError):
    def __init__(self, msg, flats):
        super().__init__(msg)
        self.flats = flats


class CoverageError(ValueError):
    def __init__(self, msg, coverage):
        super().__init__(msg)
        self.coverage = coverage


@dataclass
class Flat:
    origin: np.ndarray
    direction: np.ndarray
    normal: np.ndarray
    offset: float
    r2: float
    members: np.ndarray          # record indices
    s_range: tuple

    def distance(self, q) -> np.ndarray:
        return np.abs(np.atleast_2d(q) @ self.normal - self.offset)

    def arclength(self, q) -> np.ndarray:
        return (np.atleast_2d(q) - self.origin) @ self.direction


@dataclass
class BunchingGeometry:
    """Fitted flats of the bunched choices (possibly none).

    ``mask`` marks the records assigned to a flat.
    """

    flats: list
    mask: np.ndarray
    tol: float
    info: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return len(self.flats) == 0

    @property
    def flat(self) -> Flat:
        if self.empty:
            raise ValueError("no flat was detected")
        return self.flats[0]


def _fit_line(pts: np.ndarray):
    c = pts.mean(axis=0)
    X = pts - c
    w, V = np.linalg.eigh(X.T @ X / len(pts))
    direction = V[:, -1]
    if direction.sum() < 0:
        direction = -direction
    normal = V[:, 0]
    r2 = float(1.0 - w[0] / max(w.sum(), 1e-300))
    return c, direction, normal, r2


def detect_bunching_set(ds: Dataset, q0=None, k: int = 15, scatter_tol: float = 1e-4, min_size: int = 50,
                        r2_min: float = 0.999, allow_multiple: bool = False, angle_tol: float = 1e-2,
                        dist_tol: float = 1e-3) -> BunchingGeometry:
    """Find records on lower-dimensional flats of the choice set (J = 2: lines).

    Parameters
    ----------
    ds : Dataset
    q0 : array, optional
        Outside option, excluded.
    k : int
        Neighbourhood size of the scatter test.
    scatter_tol : float
        Neighbourhoods whose smaller/larger variance ratio is below this are
        treated as one-dimensional.
    min_size : int
        Minimum records on a flat.
    r2_min : float
        Required share of variance along the fitted line.
    allow_multiple : bool
        Return every flat instead of failing when several are found.
    dist_tol : float
        Distance to the line, relative to the data scale, within which
        records count as members.

    Raises
    ------
    AmbiguousFlatsError
        More than one distinct flat and ``allow_multiple`` is false.
    """
    if ds.dim != 2:
        raise NotImplementedError("flat detection is implemented for J = 2")
    q = ds.q
    keep = np.ones(ds.n, dtype=bool)
    if q0 is not None:
        keep &= np.any(np.abs(q - np.asarray(q0)) > 1e-12, axis=1)
    idx = np.nonzero(keep)[0]
    scale = float(np.mean(np.std(q[keep], axis=0))) if keep.any() else 1.0
    empty = BunchingGeometry([], np.zeros(ds.n, dtype=bool), dist_tol * scale, {"clusters": 0})
    if len(idx) < max(k, min_size):
        return empty
    ratio = local_scatter_ratio(q[idx], k)
    cand = idx[ratio < scatter_tol]
    if len(cand) < min_size:
        return empty
    # link candidates closer than a few typical neighbour spacings
    tree = cKDTree(q[cand])
    d, _ = tree.query(q[cand], k=min(k, len(cand)))
    radius = 5 * float(np.median(d[:, -1])) + 1e-12
    graph = tree.sparse_distance_matrix(tree, radius, output_type="coo_matrix")
    ncomp, lab = connected_components(graph, directed=False)
    flats = []
    for c in range(ncomp):
        sel = cand[lab == c]
        if len(sel) < min_size:
            continue
        origin, direction, normal, r2 = _fit_line(q[sel])
        if r2 < r2_min:
            continue
        offset = float(origin @ normal)
        merged = False
        for f in flats:
            if abs(abs(f.direction @ direction) - 1) < angle_tol and \
                    abs(f.normal @ origin - f.offset) < dist_tol * scale * 10:
                f.members = np.concatenate([f.members, sel])
                merged = True
                break
        if not merged:
            flats.append(Flat(origin, direction, normal, offset, r2, sel, (0.0, 0.0)))
    # refit merged flats and sweep in every record close to the line
    mask = np.zeros(ds.n, dtype=bool)
    for f in flats:
        f.origin, f.direction, f.normal, f.r2 = _fit_line(q[f.members])
        f.offset = float(f.origin @ f.normal)
        near = keep & (np.abs(q @ f.normal - f.offset) <= dist_tol * scale)
        s = (q[near] - f.origin) @ f.direction
        lo, hi = (q[f.members] - f.origin) @ f.direction, None
        lo, hi = float(lo.min()), float(lo.max())
        within = (s >= lo - 1e-12) & (s <= hi + 1e-12)
        f.members = np.nonzero(near)[0][within]
        f.s_range = (lo, hi)
        mask[f.members] = True
    flats.sort(key=lambda f: -len(f.members))
    info = {"clusters": int(ncomp), "candidates": int(len(cand)), "radius": radius,
            "sizes": [int(len(f.members)) for f in flats], "r2": [f.r2 for f in flats]}
    if len(flats) > 1 and not allow_multiple:
        raise AmbiguousFlatsError(f"{len(flats)} distinct flats detected", info)
    return BunchingGeometry(flats, mask, dist_tol * scale, info)


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------
@dataclass
class BunchingIndex:
    """Per-record index for the bunched records of one flat.

    ``I`` is the revealed projection ``theta . (X1 o e)``; ``B`` and ``D`` its
    normalization by ``|X1 o e|``.  ``W = theta . X1`` is only available when
    the flat runs along the main diagonal.
    """

    records: np.ndarray
    s: np.ndarray
    I: np.ndarray
    B: np.ndarray
    D: np.ndarray
    W: np.ndarray
    skipped: int
    rank_corr: float


def _local_slope(s, p, x, h):
    """Derivative of a kernel-weighted local quadratic fit of ``p`` on ``s`` at ``x``."""
    order = np.argsort(s)
    s, p = s[order], p[order]
    out = np.empty(len(x))
    for i, xi in enumerate(x):
        lo, hi = np.searchsorted(s, [xi - 3 * h, xi + 3 * h])
        ss, pp = s[lo:hi] - xi, p[lo:hi]
        hh = h
        while len(ss) < 6:
            hh *= 1.5
            lo, hi = np.searchsorted(s, [xi - 3 * hh, xi + 3 * hh])
            ss, pp = s[lo:hi] - xi, p[lo:hi]
        w = np.sqrt(np.exp(-0.5 * (ss / hh) ** 2))
        A = np.stack([np.ones_like(ss), ss, ss ** 2], axis=1) * w[:, None]
        out[i] = np.linalg.lstsq(A, pp * w, rcond=None)[0][1]
    return out


def bunching_index(ds: Dataset, geom: BunchingGeometry, flat: int = 0, bandwidth: float | None = None,
                   n_knots: int = 400) -> BunchingIndex:
    """Revealed index of every record on a flat.

    The price along the flat is smoothed by local quadratic regression; its
    slope at the chosen arclength equals ``theta . (X1 o e)``.
    """
    f = geom.flats[flat]
    rec = f.members
    q = ds.q[rec]
    off = f.distance(q) > geom.tol
    rec = rec[~off]
    s = f.arclength(ds.q[rec])
    p = ds.p[rec]
    span = float(s.max() - s.min()) if len(s) else 1.0
    h = bandwidth if bandwidth is not None else span / 100
    knots = np.linspace(s.min(), s.max(), min(n_knots, max(len(s), 2)))
    slope = np.interp(s, knots, _local_slope(s, p, knots, h))
    e = f.direction
    Xe = ds.X1[rec] * e
    nrm = np.linalg.norm(Xe, axis=1)
    B = slope / nrm
    D = Xe / nrm[:, None]
    diag = np.allclose(np.abs(e), 1 / np.sqrt(len(e)), atol=1e-3)
    W = slope / e[0] if diag else np.full(len(rec), np.nan)
    order = np.argsort(s)
    rc = float(np.corrcoef(np.argsort(np.argsort(s[order])), np.argsort(np.argsort(slope[order])))[0, 1]) \
        if len(s) > 1 else 1.0
    return BunchingIndex(rec, s, slope, B, D, W, int(off.sum()), rc)


# ---------------------------------------------------------------------------
# Radon inversion
# ---------------------------------------------------------------------------
@dataclass
class RadonEstimate:
    """Filtered back-projection reconstruction.

    Attributes
    ----------
    angles : array
        Direction angle of each (merged) bin in ``[0, pi)``.
    widths : array
        Angular width of each bin.
    counts : array
        Records per bin.
    b_grid : array
        Projection coordinate grid.
    projections : array (n_bins, n_b)
        Estimated conditional densities of ``B`` given the direction.
    axes : tuple of arrays
        Type-space grid.
    density : array
        Reconstruction after clipping and renormalization.
    raw_mass : float
        Mass of the unclipped reconstruction.
    clipped_mass : float
        Negative mass removed by clipping.
    """

    angles: np.ndarray
    widths: np.ndarray
    counts: np.ndarray
    b_grid: np.ndarray
    projections: np.ndarray
    axes: tuple
    density: np.ndarray
    raw_mass: float
    clipped_mass: float
    center: np.ndarray = None
    kde_bandwidth: float = np.nan

    def pdf(self, pts) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator
        rgi = RegularGridInterpolator(self.axes, self.density, bounds_error=False, fill_value=0.0)
        return rgi(np.atleast_2d(pts))


def fold_directions(B, D):
    """Map each pair to an angle in ``[0, pi)``, flipping the sign of ``B`` when needed."""
    D = np.atleast_2d(D)
    ang = np.arctan2(D[:, 1], D[:, 0])
    flip = (ang < 0) | (ang >= np.pi)
    ang = np.where(ang < 0, ang + np.pi, ang)
    ang = np.where(ang >= np.pi, ang - np.pi, ang)
    return ang, np.where(flip, -np.asarray(B), np.asarray(B))


def direction_bins(ang, n_bins: int = 64, min_count: int = 200):
    """Equal-angle bins on ``[0, pi)``; bins under ``min_count`` are merged with the next one.

    Returns a list of (lo, hi) edges and the bin label of each angle.
    """
    edges = np.linspace(0.0, np.pi, n_bins + 1)
    counts = np.histogram(ang, bins=edges)[0]
    groups, cur, cnt = [], [], 0
    for b in range(n_bins):
        cur.append(b)
        cnt += counts[b]
        if cnt >= min_count:
            groups.append(cur)
            cur, cnt = [], 0
    if cur:
        if groups:
            groups[-1] = groups[-1] + cur
        else:
            groups.append(cur)
    bounds = [(edges[g[0]], edges[g[-1] + 1]) for g in groups]
    lab = np.searchsorted([b[1] for b in bounds], ang, side="right")
    lab = np.clip(lab, 0, len(bounds) - 1)
    return bounds, lab, counts


def ramp_filter(p: np.ndarray, db: float, window: str = "hann") -> np.ndarray:
    """Ram-Lak filtered projection with optional Hann apodization, cut off at Nyquist.

    ``p`` is zero-padded to twice its length before the FFT so the filter
    does not wrap around.
    """
    n = p.shape[-1]
    m = int(2 ** np.ceil(np.log2(2 * n)))
    P = np.fft.fft(p, n=m, axis=-1)
    nu = np.fft.fftfreq(m, d=db)
    H = np.abs(nu)
    if window == "hann":
        H = H * 0.5 * (1 + np.cos(np.pi * nu / np.abs(nu).max()))
    elif window not in (None, "none", "ramlak"):
        raise ValueError(f"unknown window {window!r}")
    return np.real(np.fft.ifft(P * H, axis=-1))[..., :n]


def projection_center(B, D) -> np.ndarray:
    """Least-squares point ``c`` with ``B ~ c . D``; the mean type when directions are balanced."""
    return np.linalg.lstsq(np.atleast_2d(D), np.asarray(B), rcond=None)[0]


def radon_invert(B, D, axes, n_bins: int = 64, min_count: int = 200, n_b: int = 256,
                 kde_bandwidth: float | None = None, window: str = "hann",
                 min_bins: int = 8, max_gap: float = np.pi / 8, center="auto") -> RadonEstimate:
    """Reconstruct the density of types from projection pairs ``(B, D)``.

    Parameters
    ----------
    B : (n,) array
        Projections ``theta . D``.
    D : (n, 2) array
        Unit directions.
    axes : tuple of two arrays
        Type-space grid for the reconstruction.
    n_bins, min_count :
        Direction binning and merging threshold.
    n_b : int
        Points on the projection grid.
    kde_bandwidth : float, optional
        Gaussian smoothing of the per-direction histograms, in projection
        units; defaults to 2.5 type-grid spacings, matching the smoothing
        to the resolution of the reconstruction grid.
    min_bins, max_gap :
        Coverage requirements: at least ``min_bins`` merged bins and no
        uncovered arc wider than ``max_gap``.

    center : "auto", array or None
        Origin of the back-projection.  Binning blurs each bin over its
        angular width, and the blur grows with distance from the origin, so
        by default the projections are re-centred on :func:`projection_center`.

    Raises
    ------
    CoverageError
        Directions do not cover the half circle.
    """
    D = np.atleast_2d(D)
    B = np.asarray(B, dtype=float)
    if isinstance(center, str) and center == "auto":
        c = projection_center(B, D)
    elif center is None:
        c = np.zeros(D.shape[1])
    else:
        c = np.asarray(center, dtype=float)
    B = B - D @ c
    ang, Bf = fold_directions(B, D)
    bounds, lab, raw_counts = direction_bins(ang, n_bins, min_count)
    occupied = np.sort(ang)
    gaps = np.diff(np.r_[occupied, occupied[:1] + np.pi]) if len(occupied) else np.array([np.pi])
    if len(bounds) < min_bins or gaps.max() > max_gap:
        raise CoverageError(f"direction coverage insufficient: {len(bounds)} bins, largest gap "
                            f"{np.degrees(gaps.max()):.1f} degrees", raw_counts)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1) - c
    corners = np.array([[a[0] for a in axes], [a[-1] for a in axes]])
    rmax = float(np.max(np.linalg.norm(np.array(np.meshgrid(*corners.T)).reshape(2, -1).T - c, axis=1)))
    bmax = max(rmax, float(np.abs(Bf).max()))
    b_grid = np.linspace(-bmax, bmax, n_b)
    db = b_grid[1] - b_grid[0]
    if kde_bandwidth is None:
        kde_bandwidth = 2.5 * max(float(a[1] - a[0]) for a in axes)
    proj = np.zeros((len(bounds), n_b))
    angles = np.zeros(len(bounds))
    widths = np.zeros(len(bounds))
    counts = np.zeros(len(bounds), dtype=int)
    hist_edges = np.r_[b_grid - db / 2, b_grid[-1] + db / 2]
    for k, (lo, hi) in enumerate(bounds):
        sel = lab == k
        counts[k] = sel.sum()
        angles[k] = 0.5 * (lo + hi)
        widths[k] = hi - lo
        if counts[k] == 0:
            continue
        h = np.histogram(Bf[sel], bins=hist_edges)[0].astype(float)
        h = ndimage.gaussian_filter1d(h, kde_bandwidth / db, mode="constant")
        proj[k] = h / (h.sum() * db)
    filt = ramp_filter(proj, db, window)
    rec = np.zeros(X.shape[:-1])
    for k in range(len(bounds)):
        d = np.array([np.cos(angles[k]), np.sin(angles[k])])
        rec += widths[k] * np.interp(X @ d, b_grid, filt[k], left=0.0, right=0.0)
    cell = float(np.prod([a[1] - a[0] for a in axes]))
    raw_mass = float(rec.sum() * cell)
    clipped = float(-rec[rec < 0].sum() * cell)
    dens = np.clip(rec, 0.0, None)
    total = dens.sum() * cell
    if total > 0:
        dens = dens / total
    return RadonEstimate(angles, widths, counts, b_grid, proj, tuple(axes), dens, raw_mass, clipped,
                         c, float(kde_bandwidth))


def project_density(density: np.ndarray, axes, angle: float, b_grid: np.ndarray) -> np.ndarray:
    """Exact projection of a gridded density onto direction ``angle``.

    Each cell's mass is split linearly between the two nearest projection
    nodes, so the projection integrates to the same mass.
    """
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    d = np.array([np.cos(angle), np.sin(angle)])
    cell = float(np.prod([a[1] - a[0] for a in axes]))
    s = (X @ d).ravel()
    w = density.ravel() * cell
    db = b_grid[1] - b_grid[0]
    pos = (s - b_grid[0]) / db
    i0 = np.clip(np.floor(pos).astype(int), 0, len(b_grid) - 2)
    t = np.clip(pos - i0, 0.0, 1.0)
    out = np.zeros(len(b_grid))
    np.add.at(out, i0, w * (1 - t))
    np.add.at(out, i0 + 1, w * t)
    return out / db


def projection_slice_check(density: np.ndarray, axes, angles, freqs, oversample: int = 4) -> float:
    """Largest gap between the 1-D transform of each projection and the 2-D transform on the radial line.

    Both transforms are direct quadrature sums at the frequencies ``freqs``
    (cycles per unit).  The gap is relative to the transform at zero, i.e.
    the total mass.  The projection grid is ``oversample`` times finer than
    the type grid, so the gap shrinks quadratically under refinement.
    """
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    cell = float(np.prod([a[1] - a[0] for a in axes]))
    w = density.ravel() * cell
    rmax = float(np.max(np.linalg.norm(X, axis=1))) + max(a[1] - a[0] for a in axes)
    step = min(float(a[1] - a[0]) for a in axes) / oversample
    n_b = int(np.ceil(2 * rmax / step)) + 1
    b_grid = np.linspace(-rmax, rmax, n_b)
    db = b_grid[1] - b_grid[0]
    worst = 0.0
    mass = max(float(w.sum()), 1e-300)
    for a in np.atleast_1d(angles):
        d = np.array([np.cos(a), np.sin(a)])
        p = project_density(density, axes, a, b_grid)
        for nu in np.atleast_1d(freqs):
            two_d = np.sum(w * np.exp(-2j * np.pi * nu * (X @ d)))
            one_d = np.sum(p * np.exp(-2j * np.pi * nu * b_grid)) * db
            worst = max(worst, abs(two_d - one_d) / mass)
    return worst


def rotate_pairs(B, D, angle: float):
    """Rotate directions by ``angle`` (the projections are unchanged)."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return np.asarray(B), np.atleast_2d(D) @ R.T
