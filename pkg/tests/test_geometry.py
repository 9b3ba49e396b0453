import math

import numpy as np
import pytest

from src.core.geometry import (
    HBox,
    RBox,
    aabb,
    area,
    clip_convex,
    convex_hull,
    iou,
    is_convex,
    make_quad,
    min_area_rect,
    normalize_angle,
    orient,
    pairwise_iou,
    rbox_to_quad,
    signed_area,
)
from src.errors import DegenerateGeometryError, InvalidInputError


def _square(x0, y0, side):
    return np.array([[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]], dtype=float)


def _random_convex_quad(rng, center):
    # four points on an ellipse in angular order are always convex
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=4))
    while np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))) < 0.3:
        angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=4))
    a, b = rng.uniform(5.0, 20.0, size=2)
    tilt = rng.uniform(0.0, math.pi)
    pts = np.stack([a * np.cos(angles), b * np.sin(angles)], axis=1)
    rot = np.array([[math.cos(tilt), -math.sin(tilt)], [math.sin(tilt), math.cos(tilt)]])
    return make_quad(pts @ rot.T + center)


def _inside(poly, points):
    poly = orient(poly)
    inside = np.ones(len(points), dtype=bool)
    for (x1, y1), (x2, y2) in zip(np.roll(poly, 1, axis=0), poly):
        side = (x2 - x1) * (points[:, 1] - y1) - (y2 - y1) * (points[:, 0] - x1)
        inside &= side >= 0
    return inside


def test_signed_area_positive_for_canonical_rectangle():
    rect = np.array([[0, 0], [10, 0], [10, 5], [0, 5]], dtype=float)
    assert signed_area(rect) == 50.0
    assert signed_area(rect[::-1]) == -50.0
    assert area(rect[::-1]) == 50.0


def test_orient_reverses_negative_polygons():
    rect = np.array([[0, 5], [10, 5], [10, 0], [0, 0]], dtype=float)
    assert signed_area(rect) < 0
    assert signed_area(orient(rect)) == 50.0


def test_aabb_of_rotated_square():
    diamond = np.array([[5, 0], [10, 5], [5, 10], [0, 5]], dtype=float)
    assert aabb(diamond) == HBox(5.0, 5.0, 10.0, 10.0)


def test_aabb_zero_extent_is_degenerate():
    with pytest.raises(DegenerateGeometryError):
        aabb([[0, 0], [10, 0], [5, 0]])


def test_hbox_rejects_bad_values():
    with pytest.raises(DegenerateGeometryError):
        HBox(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(InvalidInputError):
        HBox(float("nan"), 0.0, 1.0, 1.0)


def test_hbox_corners_clockwise_from_top_left():
    corners = HBox(5.0, 2.5, 10.0, 5.0).corners()
    np.testing.assert_array_equal(corners, [[0, 0], [10, 0], [10, 5], [0, 5]])


def test_normalize_angle():
    assert normalize_angle(math.pi / 2) == pytest.approx(-math.pi / 2)
    assert normalize_angle(0.3 + math.pi) == pytest.approx(0.3)
    assert normalize_angle(-math.pi / 2) == pytest.approx(-math.pi / 2)


def test_is_convex():
    assert is_convex(_square(0, 0, 2))
    assert not is_convex([[0, 0], [10, 0], [2, 2], [0, 10]])
    assert not is_convex([[0, 0], [1, 0], [2, 0], [3, 0]])


def test_make_quad_repairs_self_intersection():
    bowtie = np.array([[0, 0], [10, 5], [10, 0], [0, 5]], dtype=float)
    quad = make_quad(bowtie)
    assert quad.shape == (4, 2)
    assert signed_area(quad) == pytest.approx(50.0)


def test_make_quad_rejects_concave_quad():
    with pytest.raises(DegenerateGeometryError):
        make_quad([[0, 0], [10, 0], [2, 2], [0, 10]])


def test_make_quad_needs_four_vertices():
    with pytest.raises(InvalidInputError):
        make_quad([[0, 0], [1, 0], [1, 1]])


def test_convex_hull_of_collinear_points_is_degenerate():
    with pytest.raises(DegenerateGeometryError):
        convex_hull([[0, 0], [1, 1], [2, 2], [3, 3]])


def test_iou_simple_cases():
    a = _square(0, 0, 2)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, _square(1, 0, 2)) == pytest.approx(1.0 / 3.0)
    assert iou(a, _square(5, 5, 2)) == 0.0


def test_touching_squares_do_not_overlap():
    assert iou(_square(0, 0, 2), _square(2, 0, 2)) == 0.0


def test_clip_convex_disjoint_is_empty():
    assert clip_convex(_square(0, 0, 1), _square(3, 3, 1)).shape == (0, 2)


def test_clip_convex_of_overlapping_squares():
    inter = clip_convex(_square(0, 0, 2), _square(1, 1, 2))
    assert area(inter) == pytest.approx(1.0)


def test_iou_is_symmetric_bit_for_bit():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = _random_convex_quad(rng, rng.uniform(0, 10, size=2))
        b = _random_convex_quad(rng, rng.uniform(0, 10, size=2))
        assert iou(a, b) == iou(b, a)


def _check_iou_against_sampling(rng, pairs, samples):
    for _ in range(pairs):
        a = _random_convex_quad(rng, np.zeros(2))
        b = _random_convex_quad(rng, rng.uniform(-5, 5, size=2))
        both = np.vstack([a, b])
        lo, hi = both.min(axis=0), both.max(axis=0)
        points = rng.uniform(lo, hi, size=(samples, 2))
        in_a, in_b = _inside(a, points), _inside(b, points)
        union = np.count_nonzero(in_a | in_b)
        estimate = np.count_nonzero(in_a & in_b) / union
        assert abs(iou(a, b) - estimate) < 0.01


def test_iou_matches_monte_carlo():
    _check_iou_against_sampling(np.random.default_rng(11), 20, 200_000)


@pytest.mark.slow
def test_iou_matches_monte_carlo_at_full_scale():
    _check_iou_against_sampling(np.random.default_rng(12), 100, 1_000_000)


def test_pairwise_iou_matches_iou():
    rng = np.random.default_rng(5)
    polys_a = [_random_convex_quad(rng, rng.uniform(0, 10, size=2)) for _ in range(4)]
    polys_b = [_random_convex_quad(rng, rng.uniform(0, 10, size=2)) for _ in range(3)]
    matrix = pairwise_iou(polys_a, polys_b)
    assert matrix.shape == (4, 3)
    for i, a in enumerate(polys_a):
        for j, b in enumerate(polys_b):
            assert matrix[i, j] == iou(a, b)


def test_rbox_to_quad_keeps_size():
    quad = rbox_to_quad(RBox(5.0, 6.0, 20.0, 8.0, 0.3))
    assert area(quad) == pytest.approx(160.0)
    np.testing.assert_allclose(quad.mean(axis=0), [5.0, 6.0])


def test_min_area_rect_recovers_rotated_rectangle():
    quad = rbox_to_quad(RBox(5.0, 6.0, 20.0, 8.0, 0.3))
    rb = min_area_rect(quad)
    assert rb.w * rb.h == pytest.approx(160.0)
    assert (rb.x, rb.y) == pytest.approx((5.0, 6.0))
    assert iou(quad, rbox_to_quad(rb)) == pytest.approx(1.0, abs=1e-9)


def test_min_area_rect_encloses_general_quad():
    quad = np.array([[0, 0], [8, 1], [9, 6], [1, 4]], dtype=float)
    rb = min_area_rect(quad)
    assert rb.w * rb.h >= area(quad)
    assert iou(quad, rbox_to_quad(rb)) == pytest.approx(area(quad) / (rb.w * rb.h), rel=1e-9)
