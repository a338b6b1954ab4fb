"""Plain columnar text artifacts: records, menus, grids and plot data.

Every file starts with ``#`` comment lines (a format tag, then free
metadata as ``# key: value``), one header line of column names and
whitespace-free comma-separated numbers written at 17 significant digits.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .simulate import Dataset
from .solver import Menu

FMT = "%.17g"


class ArtifactError(ValueError):
    """Malformed artifact file; the message names the offending column, row or field."""


class EmptyDatasetError(ArtifactError):
    pass


class UnsupportedPlotError(ValueError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_table(path, columns: dict, comments=(), tag: str = "table") -> Path:
    """Write equal-length columns with a comment header."""
    path = Path(path)
    names = list(columns)
    cols = [np.asarray(columns[k], dtype=float).reshape(-1) for k in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns must have equal length")
    with open(path, "w", newline="") as fh:
        fh.write(f"# screenlab {tag}\n")
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(",".join(names) + "\n")
        if n:
            np.savetxt(fh, np.column_stack(cols), delimiter=",", fmt=FMT)
    return path


def read_table(path):
    """Read a table written by :func:`write_table`; returns (columns, comments)."""
    path = Path(path)
    comments, header, rows = [], None, []
    with open(path, newline="") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            if header is None:
                header = [h.strip() for h in next(csv.reader([line]))]
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ArtifactError(f"{path.name}: row {line_no} has {len(cells)} cells, header has {len(header)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                for name, c in zip(header, cells):
                    try:
                        float(c)
                    except ValueError:
                        raise ArtifactError(f"{path.name}: non-numeric cell {c!r} at row {line_no}, column {name!r}") \
                            from None
    if header is None:
        raise EmptyDatasetError(f"{path.name}: empty file (no header)")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {h: data[:, k] for k, h in enumerate(header)}, comments


def _meta(comments) -> dict:
    out = {}
    for c in comments:
        if ":" in c:
            k, v = c.split(":", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------
def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_dataset(ds: Dataset, path) -> Path:
    """Header ``q_1..q_J,p,x1_1..x1_J,x2_1..x2_K,z``; provenance goes to ``<path>.meta.json``."""
    cols = {f"q_{j + 1}": ds.q[:, j] for j in range(ds.dim)}
    cols["p"] = ds.p
    cols.update({f"x1_{j + 1}": ds.X1[:, j] for j in range(ds.X1.shape[1])})
    cols.update({f"x2_{k + 1}": ds.X2[:, k] for k in range(ds.X2.shape[1])})
    cols["z"] = ds.z
    path = Path(path)
    names = list(cols)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, np.column_stack([np.asarray(cols[k], dtype=float) for k in names]), delimiter=",", fmt=FMT)
    side = {"n": ds.n, "format": "screenlab dataset", "meta": ds.meta}
    _sidecar(path).write_text(json.dumps(side, sort_keys=True, indent=1, default=str) + "\n")
    return path


def read_dataset(path, require_z: bool = False) -> Dataset:
    """Read records written by :func:`write_dataset`.

    The sidecar metadata file is optional; without it the provenance is empty.

    Parameters
    ----------
    require_z : bool
        Demand a regime column (two-regime analyses).

    Raises
    ------
    EmptyDatasetError
        No header or no records.
    ArtifactError
        Missing column (named), unknown column, or non-numeric cell.
    """
    name = Path(path).name
    cols, _ = read_table(path)
    names = list(cols)
    qn = sorted((c for c in names if c.startswith("q_") and c[2:].isdigit()), key=lambda c: int(c[2:]))
    if not qn:
        raise ArtifactError(f"{name}: missing column 'q_1'")
    for j in range(len(qn)):
        if f"q_{j + 1}" not in cols:
            raise ArtifactError(f"{name}: missing column 'q_{j + 1}'")
    if "p" not in cols:
        raise ArtifactError(f"{name}: missing column 'p'")
    if require_z and "z" not in cols:
        raise ArtifactError(f"{name}: missing column 'z'")
    x1 = sorted((c for c in names if c.startswith("x1_") and c[3:].isdigit()), key=lambda c: int(c[3:]))
    x2 = sorted((c for c in names if c.startswith("x2_") and c[3:].isdigit()), key=lambda c: int(c[3:]))
    known = set(qn) | {"p", "z"} | set(x1) | set(x2)
    unknown = [c for c in names if c not in known]
    if unknown:
        raise ArtifactError(f"{name}: unknown column {unknown[0]!r}")
    n = len(cols["p"])
    if n == 0:
        raise EmptyDatasetError(f"{name}: dataset has no records")
    q = np.column_stack([cols[c] for c in qn])
    X1 = np.column_stack([cols[c] for c in x1]) if x1 else None
    X2 = np.column_stack([cols[c] for c in x2]) if x2 else None
    z = cols["z"].astype(int) if "z" in cols else None
    side = _sidecar(path)
    meta = json.loads(side.read_text()).get("meta", {}) if side.exists() else {}
    return Dataset(q, cols["p"], X1, X2, z, meta)


# ---------------------------------------------------------------------------
# menus and grids
# ---------------------------------------------------------------------------
def write_menu(menu: Menu, path) -> Path:
    """Grid file: one row per type node with utilities, allocation, price and region label."""
    T = menu.nodes
    cols = {"theta1": T[..., 0], "theta2": T[..., 1], "U": menu.U, "U0": menu.U0,
            "y1": menu.y[..., 0], "y2": menu.y[..., 1], "q1": menu.rho[..., 0], "q2": menu.rho[..., 1],
            "price": menu.price, "label": menu.labels}
    X1 = np.broadcast_to(np.asarray(menu.X1, dtype=float), (2,))
    comments = [f"shape: {menu.U.shape[0]} {menu.U.shape[1]}", f"objective: {float(menu.objective)!r}",
                f"X1: {float(X1[0])!r} {float(X1[1])!r}", "units: types and bundles in model units; label 0 excluded, 1 bunched, 2 screened"]
    return write_table(path, cols, comments, tag="menu")


def read_menu(path) -> Menu:
    """Rebuild a :class:`Menu` from :func:`write_menu` output (residual fields are not stored)."""
    cols, comments = read_table(path)
    meta = _meta(comments)
    try:
        n1, n2 = (int(v) for v in meta["shape"].split())
    except KeyError:
        raise ArtifactError(f"{Path(path).name}: missing header field 'shape'") from None
    shape = (n1, n2)
    for c in ("theta1", "theta2", "U", "U0", "y1", "y2", "q1", "q2", "price", "label"):
        if c not in cols:
            raise ArtifactError(f"{Path(path).name}: missing column {c!r}")
    g = {k: v.reshape(shape) for k, v in cols.items()}
    axes = (g["theta1"][:, 0].copy(), g["theta2"][0, :].copy())
    X1 = np.array([float(v) for v in meta.get("X1", "1 1").split()])
    y = np.stack([g["y1"], g["y2"]], axis=-1)
    rho = np.stack([g["q1"], g["q2"]], axis=-1)
    z = np.zeros(shape)
    return Menu(axes, g["U"], g["U0"], y, rho, g["price"], g["label"].astype(int), z, np.full(shape, np.nan),
                np.zeros_like(y), z, z, float(meta.get("objective", "nan")), {"source": str(path)}, X1)


def write_grid(path, axes, fields: dict, comments=(), tag: str = "grid") -> Path:
    """Two-dimensional lattice fields, one row per node, coordinates first."""
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    cols = {f"x{j + 1}": X[..., j] for j in range(X.shape[-1])}
    for k, v in fields.items():
        v = np.asarray(v, dtype=float)
        if v.ndim == X.ndim:
            for j in range(v.shape[-1]):
                cols[f"{k}{j + 1}"] = v[..., j]
        else:
            cols[k] = v
    return write_table(path, cols, comments, tag=tag)


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------
def emit_plot_data(artifact, kind: str, path) -> Path:
    """Columnar plot data for common artifact and plot-kind pairings.

    ``Menu`` + ``"surface"``: type grid with allocation, price and region
    label.  ``Dataset`` + ``"scatter"``: ``(q1, q2, p)``.  Density objects
    (anything with ``axes`` and ``density`` or ``values``) + ``"density"``:
    grid of density values.  A trajectory array ``(L, J)`` or a list of them
    + ``"trajectory"``: ordered ``(L, q1, q2)`` rows (with a ``path``
    column for several).

    Raises
    ------
    UnsupportedPlotError
        The artifact does not support the requested kind.
    """
    if kind == "surface" and isinstance(artifact, Menu):
        T = artifact.nodes
        cols = {"theta1": T[..., 0], "theta2": T[..., 1], "q1": artifact.rho[..., 0], "q2": artifact.rho[..., 1],
                "price": artifact.price, "label": artifact.labels}
        return write_table(path, cols, ["axes: theta1 theta2 (type units); q1 q2 (bundle units); price (money)",
                                        "label: 0 excluded, 1 bunched, 2 screened"], tag="plot surface")
    if kind == "scatter" and isinstance(artifact, Dataset):
        cols = {f"q{j + 1}": artifact.q[:, j] for j in range(artifact.dim)}
        cols["p"] = artifact.p
        return write_table(path, cols, ["axes: q (bundle units); p (money)"], tag="plot scatter")
    if kind == "density":
        axes = getattr(artifact, "axes", None)
        vals = getattr(artifact, "density", None)
        if vals is None:
            vals = getattr(artifact, "values", None)
        if axes is not None and isinstance(vals, np.ndarray) and vals.ndim == len(axes):
            return write_grid(path, axes, {"density": vals},
                              ["axes: x1 x2 (type units); density (per unit area)"], tag="plot density")
    if kind == "trajectory":
        paths = artifact if isinstance(artifact, (list, tuple)) else [artifact]
        paths = [np.atleast_2d(np.asarray(p, dtype=float)) for p in paths]
        if all(p.ndim == 2 and p.shape[1] == 2 for p in paths):
            cols = {"path": np.concatenate([np.full(len(p), k) for k, p in enumerate(paths)]),
                    "L": np.concatenate([np.arange(len(p)) for p in paths]),
                    "q1": np.concatenate([p[:, 0] for p in paths]),
                    "q2": np.concatenate([p[:, 1] for p in paths])}
            if len(paths) == 1:
                cols.pop("path")
            return write_table(path, cols, ["axes: L (iteration); q1 q2 (bundle units)"], tag="plot trajectory")
    raise UnsupportedPlotError(f"{type(artifact).__name__} does not support plot kind {kind!r}")


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
