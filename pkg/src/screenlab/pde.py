"""Divergence-form elliptic solver on a masked lattice.

Solves ``div(K (grad P - grad C)) = -m`` for ``C`` with P1 finite elements
on the triangulation of the lattice cells inside a mask.  The conormal flux
condition is natural, so on every boundary node whose equation is kept the
flux ``K (grad P - grad C) . n`` vanishes in the weak sense.

Integrating the equation shows that the flux cannot vanish on the whole
boundary when ``m`` has positive mass.  Two closures are offered for the
part of the boundary that faces the bunching or exclusion regions:

``inner="point"``
    The missing mass leaves through a single node (for instance the node
    nearest the outside option, where the exclusion interface collapses).
    That node's equation is dropped.
``inner="polynomial"``
    The equations of the inner boundary nodes are dropped and the cost is
    sought in a space of low-degree polynomials.  Without the inner flux the
    local equations leave a large family of solutions; the polynomial sieve
    relies on the analyticity of the cost to single one out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularWeightError(ValueError):
    """Raised when the weighting determinant is too small somewhere on the mesh."""


@dataclass
class PDEResult:
    C: np.ndarray                 # nodal values on the lattice (NaN outside the mask)
    grad: np.ndarray              # nodal gradient from the P1 solution (NaN outside)
    residual: float               # relative residual of the kept equations
    boundary_residual: float      # largest relative residual on kept boundary equations
    kept: np.ndarray              # lattice mask of nodes whose equation was kept
    boundary: np.ndarray          # lattice mask of boundary nodes
    info: dict


def lattice_triangles(mask: np.ndarray):
    """Triangles (as flat lattice indices) covering the cells touched by ``mask``."""
    n1, n2 = mask.shape
    idx = np.arange(n1 * n2).reshape(n1, n2)
    tris = []
    for i in range(n1 - 1):
        for j in range(n2 - 1):
            c = [mask[i, j], mask[i + 1, j], mask[i, j + 1], mask[i + 1, j + 1]]
            a, b, d, e = idx[i, j], idx[i + 1, j], idx[i, j + 1], idx[i + 1, j + 1]
            if all(c):
                tris += [(a, b, e), (a, e, d)]
            elif sum(c) == 3:
                tris.append(tuple(v for v, ok in zip((a, b, e, d), (c[0], c[1], c[3], c[2])) if ok))
    return np.array(tris, dtype=int).reshape(-1, 3)


def boundary_nodes(mask: np.ndarray) -> np.ndarray:
    """Mask nodes with at least one 8-neighbour outside the mask (or on the lattice edge)."""
    pad = np.pad(mask, 1, constant_values=False)
    inner = np.ones_like(mask)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            inner &= pad[1 + di: 1 + di + mask.shape[0], 1 + dj: 1 + dj + mask.shape[1]]
    return mask & ~inner


def polynomial_basis(points, degree: int, center=None, scale=None):
    """Monomials up to ``degree`` in standardized coordinates, with their gradients.

    Returns ``(B, dB)`` with ``B`` of shape (n, k) and ``dB`` of shape (n, k, 2).
    The constant column comes first.
    """
    x = np.asarray(points, dtype=float)
    center = x.mean(axis=0) if center is None else np.asarray(center)
    scale = x.std(axis=0) if scale is None else np.asarray(scale)
    s = (x - center) / scale
    ex = [(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)]
    B = np.stack([s[:, 0] ** a * s[:, 1] ** b for a, b in ex], axis=1)
    d0 = np.stack([a * s[:, 0] ** max(a - 1, 0) * s[:, 1] ** b / scale[0] for a, b in ex], axis=1)
    d1 = np.stack([b * s[:, 0] ** a * s[:, 1] ** max(b - 1, 0) / scale[1] for a, b in ex], axis=1)
    return B, np.stack([d0, d1], axis=-1)


def _triangle_geometry(X, tris):
    P = X[tris]                                       # (T, 3, 2)
    D = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=1)
    area = 0.5 * np.abs(np.linalg.det(D))
    ref = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    G = np.linalg.solve(D, np.broadcast_to(ref, D.shape[:1] + ref.shape))   # (T, 2, 3)
    return area, G


def assemble(axes, mask, K, gradP, m):
    """Stiffness matrix and load vector for ``div(K grad C) = div(K grad P) + m``.

    The weak form is ``int K grad C . grad phi = int K grad P . grad phi - int m phi``.
    Nodal fields are interpolated linearly on each triangle and integrated
    with the edge-midpoint rule, exact for quadratic integrands.
    """
    n1, n2 = len(axes[0]), len(axes[1])
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    tris = lattice_triangles(mask)
    Kf = K.reshape(-1, 2, 2)
    gPf = gradP.reshape(-1, 2)
    mf = m.reshape(-1)
    area, G = _triangle_geometry(X, tris)
    KT = Kf[tris].mean(axis=1)                                    # linear K: mean is exact
    loc = area[:, None, None] * np.einsum("tki,tkl,tlj->tij", G, KT, G)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    A = sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(n1 * n2, n1 * n2))
    pairs = [(0, 1), (1, 2), (0, 2)]
    flux = np.zeros((len(tris), 2))
    b = np.zeros(n1 * n2)
    for a_, c_ in pairs:
        Km = 0.5 * (Kf[tris[:, a_]] + Kf[tris[:, c_]])
        gm = 0.5 * (gPf[tris[:, a_]] + gPf[tris[:, c_]])
        flux += np.einsum("tij,tj->ti", Km, gm) / 3
    np.add.at(b, tris.ravel(), (area[:, None] * np.einsum("tki,tk->ti", G, flux)).ravel())
    # int m phi_i with m linear: area/12 (2 m_i + sum of the other two)
    mt = mf[tris]
    load = area[:, None] * (mt + mt.sum(axis=1, keepdims=True)) / 12
    np.add.at(b, tris.ravel(), -load.ravel())
    return A, b


def fem_gradient(axes, mask, C):
    """Nodal gradient as the area-weighted mean of the adjacent P1 triangle gradients."""
    n1, n2 = len(axes[0]), len(axes[1])
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    Cf = np.nan_to_num(C.reshape(-1))
    tris = lattice_triangles(mask)
    out = np.full((n1 * n2, 2), np.nan)
    if len(tris) == 0:
        return out.reshape(n1, n2, 2)
    area, G = _triangle_geometry(X, tris)
    g = np.einsum("tki,ti->tk", G, Cf[tris])
    acc = np.zeros((n1 * n2, 2))
    wsum = np.zeros(n1 * n2)
    for k in range(3):
        np.add.at(acc, tris[:, k], area[:, None] * g)
        np.add.at(wsum, tris[:, k], area)
    ok = wsum > 0
    out[ok] = acc[ok] / wsum[ok, None]
    return out.reshape(n1, n2, 2)


def solve_divergence_pde(axes, mask, K, gradP, m, inner="point", inner_nodes=None, source=None,
                         anchor=None, anchor_value=0.0, degree: int = 4, det=None, det_tol: float = 1e-10,
                         cond_tol: float = 1e-9):
    """Solve ``div(K (grad P - grad C)) = -m`` on the masked lattice.

    Parameters
    ----------
    axes : tuple of two arrays
    mask : (n1, n2) bool
        Lattice nodes inside the region.
    K : (n1, n2, 2, 2)
        Symmetric positive definite weighting tensor.
    gradP : (n1, n2, 2)
    m : (n1, n2)
        Source density (truncated choice density).
    inner : {"point", "polynomial", "none"}
        Closure on the inner boundary, see the module docstring.
    inner_nodes : bool array, optional
        Boundary nodes on the inner part (``"polynomial"``).
    source : tuple, optional
        Lattice index of the outflow node (``"point"``).
    anchor : tuple, optional
        Lattice index where ``C`` is pinned to ``anchor_value``; defaults
        to the source node or the first mask node.
    degree : int
        Degree of the polynomial sieve (``"polynomial"`` only).
    det : (n1, n2) array, optional
        Weighting determinant to screen for singular nodes.

    Raises
    ------
    SingularWeightError
        When ``|det|`` falls below ``det_tol`` at some mask node.
    np.linalg.LinAlgError
        When the reduced system is numerically singular.
    """
    mask = np.asarray(mask, dtype=bool)
    shape = mask.shape
    if det is not None:
        bad = mask & (np.abs(det) < det_tol)
        if bad.any():
            loc = np.argwhere(bad)[:5].tolist()
            raise SingularWeightError(f"weighting determinant below {det_tol} at lattice nodes {loc}")
    A, b = assemble(axes, mask, K, gradP, m)
    bnd = boundary_nodes(mask)
    keep = mask.copy()
    idx = np.arange(mask.size).reshape(shape)
    if inner == "point":
        if source is None:
            raise ValueError("point closure needs a source node")
        keep[tuple(source)] = False
        if anchor is None:
            anchor = tuple(source)
    elif inner == "polynomial":
        if inner_nodes is not None:
            keep &= ~np.asarray(inner_nodes, dtype=bool)
    elif inner != "none":
        raise ValueError(f"unknown inner closure {inner!r}")
    if anchor is None:
        anchor = tuple(np.argwhere(mask)[0])
    cols = idx[mask]
    rows = idx[keep]
    Ar = A[rows][:, cols]
    br = b[rows]
    a_pos = int(np.searchsorted(cols, idx[tuple(anchor)]))
    info = {"n_unknowns": len(cols), "n_equations": len(rows), "closure": inner}
    if inner == "polynomial":
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)[cols]
        B, _ = polynomial_basis(X, degree)
        M = np.asarray(Ar @ B)
        # the constant is fixed by the anchor, not by the equations
        sv = np.linalg.svd(M[:, 1:], compute_uv=False)
        info["condition"] = float(sv[-1] / sv[0])
        if sv[-1] < cond_tol * sv[0]:
            raise np.linalg.LinAlgError(f"polynomial closure is singular (relative singular value {sv[-1] / sv[0]:.2e})")
        coef = np.linalg.lstsq(M[:, 1:], br, rcond=None)[0]
        sol = B[:, 1:] @ coef
        sol += anchor_value - sol[a_pos]
        info["coef"] = coef
    else:
        a_row = sp.csr_matrix(([1.0], ([0], [a_pos])), shape=(1, len(cols)))
        M = sp.vstack([Ar, a_row * abs(Ar).max()]).tocsr()
        r = np.concatenate([br, [anchor_value * abs(Ar).max()]])
        if M.shape[0] == M.shape[1]:
            sol = spla.spsolve(M.tocsc(), r)
        else:
            sol = spla.spsolve((M.T @ M).tocsc(), M.T @ r)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("sparse solve returned non-finite values")
    C = np.full(mask.size, np.nan)
    C[cols] = sol
    C = C.reshape(shape)
    res = Ar @ sol - br
    kept_b = bnd.reshape(-1)[rows]
    scale_rows = np.abs(br).max() if br.size else 1.0
    bres = float(np.max(np.abs(res[kept_b])) / max(scale_rows, 1e-300)) if kept_b.any() else 0.0
    grad = fem_gradient(axes, mask, C)
    return PDEResult(C, grad, float(np.linalg.norm(res) / max(np.linalg.norm(br), 1e-300)), bres, keep, bnd, info)


def pde_residual(axes, mask, K, gradP, m, C, keep=None) -> tuple[float, float]:
    """Relative residual of the discrete equations for given nodal ``C`` (e.g. the truth).

    Returns the overall relative residual and the largest relative
    residual on boundary equations.
    """
    A, b = assemble(axes, mask, K, gradP, m)
    keep = mask if keep is None else keep
    rows = np.nonzero(keep.reshape(-1))[0]
    cols = np.nonzero(mask.reshape(-1))[0]
    res = A[rows][:, cols] @ C.reshape(-1)[cols] - b[rows]
    bnd = boundary_nodes(mask).reshape(-1)[rows]
    scale = max(np.abs(b[rows]).max(), 1e-300)
    return float(np.linalg.norm(res) / max(np.linalg.norm(b[rows]), 1e-300)), \
        float(np.max(np.abs(res[bnd])) / scale) if bnd.any() else 0.0
