import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvtrack import geometry as geo
from hvtrack.errors import DegenerateQuad, PointAtInfinity, Singular

T = (120, 120)


def dlt_oracle(src, dst):
    """h33 = 1 linear system, solved with LAPACK (independent of the package's solver)."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.array(a, dtype=float), np.array(b, dtype=float))
    return np.append(h, 1.0).reshape(3, 3)


def project(h, pts):
    p = np.c_[pts, np.ones(len(pts))] @ h.T
    return p[:, :2] / p[:, 2:]


def test_solve_identity_and_translation():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    np.testing.assert_allclose(geo.solve_homography(sq, sq), np.eye(3), atol=1e-12)
    c = geo.template_corners(T)
    h = geo.solve_homography(c, c + [5, 0])
    np.testing.assert_allclose(h, geo.translation(5, 0), atol=1e-12)


def test_solve_matches_oracle_on_random_draws():
    rng = np.random.default_rng(0)
    c = geo.template_corners(T)
    worst = 0.0
    for _ in range(200):
        dst = c + rng.uniform(-32, 32, (4, 2))
        h = geo.solve_homography(c, dst)
        worst = max(worst, np.abs(project(h, c) - dst).max())
        np.testing.assert_allclose(h, dlt_oracle(c, dst), rtol=1e-8, atol=1e-10)
    assert worst < 1e-9


def test_solve_rejects_collinear():
    src = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    with pytest.raises(DegenerateQuad):
        geo.solve_homography(src, src)


def test_four_point_trivial_cases():
    np.testing.assert_allclose(geo.four_point_to_homography(np.zeros((4, 2)), T), np.eye(3), atol=1e-12)
    h = geo.four_point_to_homography(np.tile([3.0, -2.0], (4, 1)), T)
    np.testing.assert_allclose(h, geo.translation(3, -2), atol=1e-12)
    np.testing.assert_allclose(geo.homography_to_four_point(geo.translation(3, -2), T),
                               np.tile([3.0, -2.0], (4, 1)), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-32, 32), min_size=8, max_size=8))
def test_four_point_round_trip(vals):
    d = np.array(vals).reshape(4, 2)
    h = geo.four_point_to_homography(d, T)
    assert np.abs(geo.homography_to_four_point(h, T) - d).max() < 1e-9


def test_point_at_infinity():
    h = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=float)  # w = x
    with pytest.raises(PointAtInfinity):
        geo.apply(h, [[0.0, 5.0]])


def test_compose_and_invert():
    rng = np.random.default_rng(1)
    c = geo.template_corners(T)
    for _ in range(50):
        a = geo.solve_homography(c, c + rng.uniform(-20, 20, (4, 2)))
        b = geo.solve_homography(c, c + rng.uniform(-20, 20, (4, 2)))
        pts = rng.uniform(0, 119, (10, 2))
        np.testing.assert_allclose(geo.apply(geo.compose(a, b), pts), project(a, project(b, pts)), atol=1e-8)
        np.testing.assert_allclose(geo.compose(a, geo.invert(a)), np.eye(3), atol=1e-10)


def test_invert_singular():
    with pytest.raises(Singular):
        geo.invert(np.array([[1, 2, 3], [2, 4, 6], [0, 0, 1]], dtype=float))


def test_canonical_form():
    h = geo.canonical(2.5 * geo.translation(1, 2))
    assert h[2, 2] == 1.0
    g = geo.canonical(np.array([[0, 1, 0], [1, 0, 0], [1, 1, 0]], dtype=float))
    assert np.isclose(np.linalg.norm(g), 1.0)


def test_surrogate_identity_recovers_full_homography():
    """Pushing the true inter-template homography through the surrogate update
    and back to frame space reproduces the frame-to-frame homography."""
    rng = np.random.default_rng(2)
    corners = geo.template_corners(T)
    worst = 0.0
    for _ in range(1000):
        q_i = geo.template_corners((120, 120)) + 60 + rng.uniform(-10, 10, (4, 2))
        q_j = q_i + rng.uniform(-30, 30, (4, 2))
        h_in = geo.normalization_homography(q_i, T)
        h_jn = geo.normalization_homography(q_i + rng.uniform(-30, 30, (4, 2)), T)
        h_ij = geo.solve_homography(q_j, q_i)  # frame j -> frame i
        h_s = geo.compose(h_in, geo.compose(h_ij, geo.invert(h_jn)))
        rec = geo.recover_full_homography(h_in, geo.surrogate_update(h_jn, h_s))
        worst = max(worst, np.abs(project(rec, q_j) - project(h_ij, q_j)).max())
        assert np.abs(project(rec, corners) - project(h_ij, corners)).max() < 1e-8
    assert worst < 1e-8


def test_normalization_homography_maps_quad_to_template():
    q = np.array([[10, 20], [200, 15], [190, 180], [5, 170]], dtype=float)
    h = geo.normalization_homography(q, T)
    np.testing.assert_allclose(geo.apply(h, q), geo.template_corners(T), atol=1e-9)


def test_full_frame_normalization_is_scaling():
    q = geo.template_corners((240, 180))
    h = geo.normalization_homography(q, T)
    np.testing.assert_allclose(h, geo.scaling(119 / 239, 119 / 179), atol=1e-12)


def test_level_round_trip():
    rng = np.random.default_rng(3)
    c = geo.template_corners(T)
    h = geo.solve_homography(c, c + rng.uniform(-8, 8, (4, 2)))
    for lv in (30, 60, 120):
        hl = geo.to_level(h, T, (lv, lv))
        np.testing.assert_allclose(geo.from_level(hl, T, (lv, lv)), h, atol=1e-10)
        d_full = geo.homography_to_four_point(h, T)
        d_lv = geo.homography_to_four_point(hl, (lv, lv))
        np.testing.assert_allclose(d_lv, d_full * (lv - 1) / 119, atol=1e-9)


def test_quad_validity():
    good = geo.template_corners(T)
    assert geo.is_valid_quad(good)
    bowtie = good[[0, 2, 1, 3]]
    assert not geo.is_valid_quad(bowtie)
    assert not geo.is_valid_quad(good[::-1])  # counter-clockwise in image coordinates
    tiny = np.array([[0, 0], [3, 0], [3, 3], [0, 3]], dtype=float)
    assert not geo.is_valid_quad(tiny)
    with pytest.raises(DegenerateQuad):
        geo.check_quad(bowtie)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=9, max_size=9))
def test_format_parse_round_trip(vals):
    h = np.array(vals).reshape(3, 3)
    np.testing.assert_array_equal(geo.parse_homography(geo.format_homography(h)), h)
