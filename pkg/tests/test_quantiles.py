import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from screenlab.quantiles import ExtrapolationError, QuantileError, QuantileMap, quantile_match


@pytest.fixture(scope="module")
def cloud():
    rng = np.random.default_rng(11)
    return rng.normal([1.0, -0.5], [0.6, 0.3], (800, 2))


def test_one_dimensional_rank_is_centred_cdf():
    rng = np.random.default_rng(0)
    S = rng.normal(size=501)
    qm = QuantileMap(S)
    x = np.linspace(-2, 2, 37)
    ecdf = np.mean(S[None, :] < x[:, None], axis=1)
    assert np.allclose(qm.rank(x[:, None])[:, 0], 2 * ecdf - 1, atol=1e-15)


def test_one_dimensional_inverse_is_classical_quantile():
    rng = np.random.default_rng(1)
    S = rng.uniform(size=401)
    qm = QuantileMap(S)
    # median of an odd sample is a sample point; rank 0 must land on it
    assert qm.inverse([[0.0]])[0, 0] == pytest.approx(np.median(S), abs=1e-8)


def test_symmetric_sample_median_is_centre():
    rng = np.random.default_rng(2)
    mu = np.array([0.3, -0.7])
    half = rng.normal(size=(300, 2))
    qm = QuantileMap(np.r_[mu + half, mu - half])
    assert np.allclose(qm.inverse([[0.0, 0.0]])[0], mu, atol=1e-7)


def test_asymmetric_perturbation_moves_median(cloud):
    base = QuantileMap(cloud).inverse([[0.0, 0.0]])[0]
    moved = QuantileMap(np.r_[cloud, cloud[:80] + [3.0, 0.0]]).inverse([[0.0, 0.0]])[0]
    assert np.linalg.norm(moved - base) > 1e-2


def test_ranks_inside_unit_ball(cloud):
    qm = QuantileMap(cloud)
    q = np.random.default_rng(3).normal([1.0, -0.5], 3.0, (500, 2))
    assert np.all(np.linalg.norm(qm.rank(q), axis=1) < 1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4))
def test_rank_field_is_monotone(v):
    rng = np.random.default_rng(4)
    qm = QuantileMap(rng.normal(size=(200, 2)))
    a, b = np.array(v[:2]), np.array(v[2:])
    ra, rb = qm.rank(np.r_[[a], [b]])
    assert (ra - rb) @ (a - b) >= -1e-12


def test_inverse_undoes_rank(cloud):
    qm = QuantileMap(cloud)
    rng = np.random.default_rng(5)
    q = cloud.mean(axis=0) + rng.normal(0, 0.3, (40, 2))
    back = qm.inverse(qm.rank(q))
    assert np.max(np.abs(back - q)) < 1e-6


def test_rank_jacobian_matches_differences(cloud):
    qm = QuantileMap(cloud)
    q = np.array([[0.9, -0.4], [1.5, -0.2]])
    Jm = qm.rank_jacobian(q)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (qm.rank(q + e) - qm.rank(q - e)) / (2 * h)
        assert np.allclose(Jm[:, :, j], fd, atol=1e-6)


def test_small_sample_and_bad_rank_rejected(cloud):
    with pytest.raises(QuantileError):
        QuantileMap(cloud[:5])
    with pytest.raises(QuantileError):
        QuantileMap(cloud).inverse([[0.8, 0.8]])


def test_match_to_itself_is_identity(cloud):
    m = quantile_match(cloud, cloud)
    q = cloud[:20] * 0.9 + cloud.mean(axis=0) * 0.1
    assert np.max(np.abs(m(q) - q)) < 1e-6


def test_match_to_translated_sample_is_translation(cloud):
    shift = np.array([0.4, -1.2])
    m = quantile_match(cloud, cloud + shift)
    q = cloud.mean(axis=0) + np.random.default_rng(6).normal(0, 0.2, (15, 2))
    assert np.max(np.abs(m(q) - (q + shift))) < 1e-6


def test_match_refuses_points_outside_source(cloud):
    m = quantile_match(cloud, cloud)
    with pytest.raises(ExtrapolationError) as err:
        m([[50.0, 50.0]])
    assert err.value.points.shape == (1, 2)


def test_tabulated_match_close_to_exact(cloud):
    shift = np.array([0.2, 0.1])
    m = quantile_match(cloud, cloud + shift)
    lo, hi = np.percentile(cloud, [10, 90], axis=0)
    axes = tuple(np.linspace(lo[j], hi[j], 15) for j in range(2))
    m.tabulate(axes)
    q = np.random.default_rng(7).uniform(lo, hi, (30, 2))
    q = q[m.source.in_support(q)]
    # bilinear interpolation of an exact translation is exact
    assert np.max(np.abs(m(q) - (q + shift))) < 1e-6
