import numpy as np
import pytest

from screenlab.ident_bunching import (AmbiguousFlatsError, CoverageError, bunching_index, detect_bunching_set,
                                      project_density, projection_slice_check, radon_invert, rotate_pairs)
from screenlab.simulate import BilinearBandGenerator, CovariateLaw, Dataset

GEN = BilinearBandGenerator()


def _band_sample(n, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 1, (n, 2))
    X1, _ = CovariateLaw("directions").draw(n, 2, rng)
    return GEN.sample(theta, X1, seed=seed)


@pytest.fixture(scope="module")
def band():
    ds = _band_sample(20000)
    geom = detect_bunching_set(ds)
    return ds, geom, bunching_index(ds, geom)


def _gauss_pairs(n, mean, sd, rng):
    theta = rng.normal(mean, sd, (n, 2))
    a = rng.uniform(0, 2 * np.pi, n)
    D = np.c_[np.cos(a), np.sin(a)]
    return np.sum(theta * D, axis=1), D


# ---------------------------------------------------------------- flat detection
def test_flat_runs_along_the_diagonal(band):
    ds, geom, _ = band
    assert len(geom.flats) == 1
    f = geom.flat
    assert abs(abs(f.normal @ np.array([1.0, -1.0]) / np.sqrt(2)) - 1) < 1e-6
    assert f.r2 >= 0.999


def test_detected_set_matches_band(band):
    ds, geom, _ = band
    truth = ds.truth["band"]
    # screened records can fall on the line by chance; only a handful
    assert np.mean(geom.mask == truth) > 0.995
    assert np.all(geom.flat.distance(ds.q[geom.mask]) <= geom.tol)


def test_isotropic_cloud_has_no_flat():
    rng = np.random.default_rng(3)
    n = 4000
    ds = Dataset(rng.normal(size=(n, 2)), rng.random(n), np.ones((n, 2)), np.zeros((n, 0)),
                 np.ones(n, dtype=int), {}, {})
    geom = detect_bunching_set(ds)
    assert geom.empty
    assert not geom.mask.any()


def test_two_separate_flats_are_ambiguous():
    rng = np.random.default_rng(4)
    s = rng.uniform(0, 1, (2, 600))
    q = np.concatenate([np.c_[s[0], s[0]], np.c_[s[1] + 3, 5 - s[1]]])
    n = len(q)
    ds = Dataset(q, rng.random(n), np.ones((n, 2)), np.zeros((n, 0)), np.ones(n, dtype=int), {}, {})
    with pytest.raises(AmbiguousFlatsError):
        detect_bunching_set(ds)
    geom = detect_bunching_set(ds, allow_multiple=True)
    assert len(geom.flats) == 2


# ---------------------------------------------------------------- bunching index
def test_index_recovers_w(band):
    ds, _, bi = band
    w = ds.truth["W"][bi.records]
    assert np.max(np.abs(bi.W - w)) <= 0.01 * np.max(np.abs(w))


def test_directions_have_unit_norm(band):
    _, _, bi = band
    assert np.allclose(np.linalg.norm(bi.D, axis=1), 1.0, atol=1e-12)


def test_index_order_follows_arclength(band):
    _, _, bi = band
    assert bi.rank_corr == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------- Radon inversion
def test_point_mass_peaks_at_source():
    rng = np.random.default_rng(5)
    theta0 = np.array([0.3, -0.2])
    a = rng.uniform(0, 2 * np.pi, 40000)
    D = np.c_[np.cos(a), np.sin(a)]
    ax = (np.linspace(-1, 1, 81),) * 2
    est = radon_invert(D @ theta0, D, ax)
    i, j = np.unravel_index(np.argmax(est.density), est.density.shape)
    h = ax[0][1] - ax[0][0]
    assert abs(ax[0][i] - theta0[0]) <= h + 1e-12
    assert abs(ax[1][j] - theta0[1]) <= h + 1e-12


def test_reconstruction_has_unit_mass():
    rng = np.random.default_rng(6)
    B, D = _gauss_pairs(30000, 0.1, 0.2, rng)
    ax = (np.linspace(-1, 1, 61),) * 2
    est = radon_invert(B, D, ax)
    cell = (ax[0][1] - ax[0][0]) ** 2
    assert est.density.min() >= 0
    assert est.density.sum() * cell == pytest.approx(1.0, abs=1e-12)
    db = est.b_grid[1] - est.b_grid[0]
    occupied = est.counts > 0
    assert np.allclose(est.projections[occupied].sum(axis=1) * db, 1.0, atol=1e-12)
    assert np.all(est.projections >= 0)


def test_gaussian_reconstruction_close():
    rng = np.random.default_rng(7)
    mu, sd = 0.1, 0.2
    B, D = _gauss_pairs(60000, mu, sd, rng)
    ax = (np.linspace(-1, 1, 61),) * 2
    est = radon_invert(B, D, ax)
    X = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
    f = np.exp(-0.5 * np.sum((X - mu) ** 2, axis=-1) / sd ** 2) / (2 * np.pi * sd ** 2)
    cell = (ax[0][1] - ax[0][0]) ** 2
    assert np.sum(np.abs(est.density - f)) * cell < 0.15


def test_rotation_equivariance():
    # a quarter turn maps the symmetric grid onto itself
    rng = np.random.default_rng(8)
    theta = rng.normal([0.3, 0.1], 0.15, (30000, 2))
    a = rng.uniform(0, 2 * np.pi, len(theta))
    D = np.c_[np.cos(a), np.sin(a)]
    B = np.sum(theta * D, axis=1)
    ax = (np.linspace(-1, 1, 41),) * 2
    est = radon_invert(B, D, ax, center=None)
    B2, D2 = rotate_pairs(B, D, np.pi / 2)
    est2 = radon_invert(B2, D2, ax, center=None)
    # rotated density at (x, y) equals the original at (y, -x)
    ref = np.rot90(est.density, k=1)
    cell = (ax[0][1] - ax[0][0]) ** 2
    assert np.sum(np.abs(est2.density - ref)) * cell < 0.02


def test_constant_direction_raises():
    B = np.linspace(0, 1, 5000)
    D = np.tile([1.0, 0.0], (5000, 1))
    with pytest.raises(CoverageError):
        radon_invert(B, D, (np.linspace(0, 1, 21),) * 2)


def test_projection_of_grid_density_keeps_mass():
    ax = (np.linspace(0, 1, 41),) * 2
    X = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
    f = np.exp(-np.sum((X - 0.5) ** 2, axis=-1) / 0.02)
    b = np.linspace(-2, 2, 801)
    p = project_density(f, ax, 0.7, b)
    assert p.sum() * (b[1] - b[0]) == pytest.approx(f.sum() * (ax[0][1] - ax[0][0]) ** 2, rel=1e-12)


def test_projection_slice_gap_shrinks():
    angles = np.linspace(0, np.pi, 7, endpoint=False)
    freqs = [0.5, 1.0, 2.0]
    gaps = []
    for m in (21, 41, 81):
        ax = (np.linspace(0, 1, m),) * 2
        X = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
        f = np.exp(-0.5 * np.sum((X - 0.45) ** 2, axis=-1) / 0.1 ** 2)
        gaps.append(projection_slice_check(f, ax, angles, freqs))
    assert gaps[-1] < 1e-3
    assert gaps[0] > gaps[1] > gaps[2]
