import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anisospde.anisotropy import (
    AnisoMatrix,
    StationaryParams,
    h_entries,
    h_matrix,
    half_angle,
    legacy_params,
    v_from_entries,
    v_from_h,
)
from anisospde.errors import NotPositiveDefinite, NotUnitDeterminant

E = math.e


@pytest.mark.parametrize(
    "v, expected",
    [((0, 0), (0, 0)), ((1, 0), (1, 0)), ((0, 1), (1 / math.sqrt(2), 1 / math.sqrt(2)))],
)
def test_half_angle_examples(v, expected):
    np.testing.assert_allclose(half_angle(v), expected, atol=1e-15)


def test_half_angle_lands_in_upper_half_plane():
    for a in np.linspace(0, 2 * np.pi, 37)[:-1]:
        ht = half_angle((2 * math.cos(a), 2 * math.sin(a)))
        assert ht.v2 >= -1e-15
        assert math.hypot(*ht) == pytest.approx(2.0)


def test_h_matrix_examples():
    np.testing.assert_array_equal(h_matrix((0, 0)).array(), np.eye(2))
    np.testing.assert_allclose(h_matrix((1, 0)).array(), np.diag([E, 1 / E]), rtol=1e-15)
    H = h_matrix((0, 1)).array()
    np.testing.assert_allclose(H, [[1.5431, 1.1752], [1.1752, 1.5431]], atol=1e-4)
    # eigendecomposition oracle
    lam, vec = np.linalg.eigh(H)
    np.testing.assert_allclose(lam, [1 / E, E], rtol=1e-14)
    assert abs(abs(vec[:, 1] @ np.array([1, 1]) / math.sqrt(2)) - 1) < 1e-14


def test_eigenpairs_follow_half_angle():
    rng = np.random.default_rng(0)
    for v in rng.normal(size=(50, 2)) * 2:
        r = np.hypot(*v)
        ht = np.array(half_angle(v)) / r
        H = h_matrix(v).array()
        np.testing.assert_allclose(H @ ht, math.exp(r) * ht, rtol=1e-12, atol=1e-12)
        perp = np.array([-ht[1], ht[0]])
        np.testing.assert_allclose(H @ perp, math.exp(-r) * perp, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize(
    "H, expected",
    [
        (np.eye(2), (0, 0)),
        (np.diag([E, 1 / E]), (1, 0)),
        ([[math.cosh(1), math.sinh(1)], [math.sinh(1), math.cosh(1)]], (0, 1)),
    ],
)
def test_v_from_h_examples(H, expected):
    np.testing.assert_allclose(v_from_h(H), expected, atol=1e-14)


def test_v_from_h_rejects_bad_matrices():
    with pytest.raises(NotUnitDeterminant):
        v_from_h(np.diag([2.0, 1.0]))
    with pytest.raises(NotPositiveDefinite):
        v_from_h(-np.eye(2))
    with pytest.raises(NotPositiveDefinite):
        v_from_h([[1.0, 2.0], [2.0, 1.0]])


def test_v_from_h_matches_eigenvector_angle_doubling():
    # the closed form must agree with the textbook construction
    rng = np.random.default_rng(1)
    for v in rng.uniform(-4, 4, size=(100, 2)):
        H = h_matrix(v).array()
        lam, vec = np.linalg.eigh(H)
        w = vec[:, 1]
        alpha = math.atan2(w[1], w[0]) % math.pi
        ref = math.log(lam[1]) * np.array([math.cos(2 * alpha), math.sin(2 * alpha)])
        np.testing.assert_allclose(v_from_h(H), ref, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0, 2 * math.pi, exclude_max=True))
def test_round_trip(r, a):
    v = (r * math.cos(a), r * math.sin(a))
    back = v_from_h(h_matrix(v))
    assert math.hypot(back[0] - v[0], back[1] - v[1]) <= 1e-9
    H = h_matrix(v)
    np.testing.assert_allclose(h_matrix(back).array(), H.array(), rtol=1e-10, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.tuples(st.floats(-10, 10), st.floats(-10, 10)))
def test_eigen_ratio_and_symmetry(v):
    H = h_matrix(v)
    r = math.hypot(*v)
    lmax, lmin = H.eigenvalues()
    assert lmax / lmin == pytest.approx(math.exp(2 * r), rel=1e-10)
    A = H.array()
    assert A[0, 1] == A[1, 0]
    # det scaled by the cancelling products
    assert abs(H.det - 1) <= 1e-12 * max(1.0, H.h11 * H.h22)


def test_det_exact_for_moderate_norm():
    rng = np.random.default_rng(2)
    v = rng.uniform(-1, 1, size=(1000, 2)) * 2
    h11, h12, h22 = h_entries(v[:, 0], v[:, 1])
    assert np.max(np.abs(h11 * h22 - h12**2 - 1)) <= 1e-12


def test_continuity_at_origin():
    for eps in [1e-3, 1e-6, 1e-9, 1e-12]:
        for a in np.linspace(0, 2 * np.pi, 9):
            e = (math.cos(a), math.sin(a))
            H = h_matrix((eps * e[0], eps * e[1])).array()
            assert np.linalg.norm(H - np.eye(2), 2) <= 2 * eps * math.exp(eps)


def test_identifiability_random_pairs():
    rng = np.random.default_rng(3)
    a = rng.uniform(-5, 5, size=(2000, 2))
    b = a + rng.normal(scale=1e-3, size=a.shape)
    ha = np.stack(h_entries(a[:, 0], a[:, 1]))
    hb = np.stack(h_entries(b[:, 0], b[:, 1]))
    # distinct inputs give distinct matrices
    assert np.all(np.max(np.abs(ha - hb), axis=0) > 1e-12)
    back = np.stack(v_from_entries(*ha), axis=1)
    assert np.max(np.abs(back - a)) < 1e-8


def test_vectorised_agrees_with_scalar():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(20, 2))
    h11, h12, h22 = h_entries(v[:, 0], v[:, 1])
    for i, vi in enumerate(v):
        assert h_matrix(vi) == AnisoMatrix(h11[i], h12[i], h22[i])


def test_legacy_params_reconstruct():
    for v, w in [((1, 0), (1, 0)), ((0, 1), (1 / math.sqrt(2), 1 / math.sqrt(2)))]:
        lp = legacy_params(v)
        assert lp.gamma == pytest.approx(1 / E)
        assert lp.beta == pytest.approx(2.3504, abs=1e-4)
        np.testing.assert_allclose(lp.unit_vector, w, atol=1e-15)
        wv = np.array(lp.unit_vector)
        rebuilt = lp.gamma * np.eye(2) + lp.beta * np.outer(wv, wv)
        np.testing.assert_allclose(rebuilt, h_matrix(v).array(), rtol=1e-13)
    lp = legacy_params((0, 0))
    assert (lp.gamma, lp.beta) == (1.0, 0.0) and lp.degenerate


def test_stationary_params():
    p = StationaryParams.make(2.0, (1.0, 0.0), 0.5)
    assert p.range == pytest.approx(math.sqrt(2))
    assert p.anisotropy_ratio == pytest.approx(E)
    with pytest.raises(ValueError):
        StationaryParams.make(0.0)
    with pytest.raises(ValueError):
        StationaryParams.make(1.0, sigma_u=float("inf"))
