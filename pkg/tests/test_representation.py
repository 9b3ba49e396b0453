import math

import numpy as np
import pytest

from src.core.geometry import HBox, area
from src.core.representation import (
    GlidingRep,
    SelectionPolicy,
    decode,
    decode_batch,
    encode,
    encode_batch,
    extreme_vertices,
    obliquity,
    select,
)
from src.errors import DegenerateGeometryError, InvalidInputError


def _rotated_rects(rng, n, min_offset_deg=0.1):
    """Vectorized rotated rectangles whose angle stays away from multiples of 90 degrees"""
    offset = math.radians(min_offset_deg)
    theta = rng.uniform(offset, math.pi / 2 - offset, size=n) * rng.choice([-1.0, 1.0], size=n)
    w = rng.uniform(1.0, 100.0, size=n)
    h = rng.uniform(1.0, 100.0, size=n)
    centers = rng.uniform(-500.0, 500.0, size=(n, 2))
    local = np.stack(
        [np.stack([-w, -h], 1), np.stack([w, -h], 1), np.stack([w, h], 1), np.stack([-w, h], 1)], axis=1
    ) / 2.0
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    x = local[..., 0] * c - local[..., 1] * s
    y = local[..., 0] * s + local[..., 1] * c
    return np.stack([x, y], axis=-1) + centers[:, None, :]


def test_encode_axis_aligned_rectangle():
    rep = encode([[0, 0], [10, 0], [10, 5], [0, 5]])
    assert rep.hbox == HBox(5.0, 2.5, 10.0, 5.0)
    assert rep.alpha == (1.0, 1.0, 1.0, 1.0)
    assert rep.r == 1.0


def test_encode_diamond():
    rep = encode([[5, 0], [10, 5], [5, 10], [0, 5]])
    assert rep.alpha == pytest.approx((0.5, 0.5, 0.5, 0.5))
    assert rep.r == pytest.approx(0.5)


def test_encode_ignores_vertex_order_and_orientation():
    quad = np.array([[2, 0], [10, 3], [8, 10], [0, 6]], dtype=float)
    expected = encode(quad)
    for shift in range(4):
        rolled = np.roll(quad, shift, axis=0)
        assert encode(rolled) == expected
        assert encode(rolled[::-1]) == expected


def test_encode_collinear_points_is_degenerate():
    with pytest.raises(DegenerateGeometryError):
        encode([[0, 0], [1, 1], [2, 2], [3, 3]])


def test_decode_known_representation():
    rep = GlidingRep(HBox(5.0, 5.0, 10.0, 10.0), (0.5, 0.5, 0.5, 0.5), 0.5)
    np.testing.assert_allclose(decode(rep), [[5, 0], [10, 5], [5, 10], [0, 5]])


def test_alpha_zero_and_one_both_give_the_box():
    box = HBox(5.0, 2.5, 10.0, 5.0)
    zero = decode(GlidingRep(box, (0.0, 0.0, 0.0, 0.0), 1.0))
    one = decode(GlidingRep(box, (1.0, 1.0, 1.0, 1.0), 1.0))
    assert area(zero) == pytest.approx(50.0)
    assert {tuple(p) for p in zero} == {tuple(p) for p in one}


def test_gliding_rep_clamps_values():
    rep = GlidingRep(HBox(0.0, 0.0, 1.0, 1.0), (-0.2, 0.5, 1.3, 1.0), 1.5)
    assert rep.alpha == (0.0, 0.5, 1.0, 1.0)
    assert rep.r == 1.0


def test_gliding_rep_rejects_bad_arity_and_nan():
    with pytest.raises(InvalidInputError):
        GlidingRep(HBox(0.0, 0.0, 1.0, 1.0), (0.5, 0.5, 0.5), 0.5)
    with pytest.raises(InvalidInputError):
        GlidingRep(HBox(0.0, 0.0, 1.0, 1.0), (0.5, 0.5, 0.5, float("nan")), 0.5)
    with pytest.raises(InvalidInputError):
        GlidingRep.from_array([1, 2, 3])


def test_array_form_roundtrip():
    rep = GlidingRep(HBox(1.0, 2.0, 3.0, 4.0), (0.1, 0.2, 0.3, 0.4), 0.6)
    assert GlidingRep.from_array(rep.as_array()) == rep


def test_extreme_vertex_ties_follow_gliding_direction():
    v = extreme_vertices([[[0, 0], [10, 0], [10, 5], [0, 5]]])[0]
    np.testing.assert_array_equal(v, [[10, 0], [10, 5], [0, 5], [0, 0]])


def test_roundtrip_over_random_rotated_rectangles():
    rng = np.random.default_rng(2024)
    quads = _rotated_rects(rng, 100_000)
    hboxes, alpha, _ = encode_batch(quads)
    decoded = decode_batch(hboxes, alpha)
    # decoded vertices come out top/right/bottom/left; compare as point sets
    dist = np.linalg.norm(decoded[:, :, None, :] - quads[:, None, :, :], axis=-1)
    assert dist.min(axis=2).max() < 1e-6


def test_axis_aligned_rectangles_encode_exactly():
    rng = np.random.default_rng(9)
    n = 10_000
    lo = rng.uniform(-100.0, 100.0, size=(n, 2))
    size = rng.uniform(0.5, 50.0, size=(n, 2))
    hi = lo + size
    quads = np.stack(
        [lo, np.stack([hi[:, 0], lo[:, 1]], 1), hi, np.stack([lo[:, 0], hi[:, 1]], 1)], axis=1
    )
    _, alpha, r = encode_batch(quads)
    assert np.all(alpha == 1.0)
    assert np.all(r == 1.0)


def test_obliquity_of_rotated_rectangle_is_below_one():
    quads = _rotated_rects(np.random.default_rng(1), 200, min_offset_deg=5.0)
    _, _, r = encode_batch(quads)
    assert np.all(r < 1.0)
    assert np.all(r >= 0.5 - 1e-12)


def test_select_uses_box_only_above_threshold():
    box = HBox(5.0, 5.0, 10.0, 10.0)
    rep = GlidingRep(box, (0.5, 0.5, 0.5, 0.5), 0.8)
    np.testing.assert_array_equal(select(rep, SelectionPolicy(0.8)), decode(rep))
    np.testing.assert_array_equal(select(rep, SelectionPolicy(0.79)), box.to_quad())
    np.testing.assert_array_equal(select(rep, SelectionPolicy(1.0)), decode(rep))


def test_select_policy_validates_threshold():
    with pytest.raises(InvalidInputError):
        SelectionPolicy(1.5)


def test_obliquity_function():
    box = HBox(5.0, 5.0, 10.0, 10.0)
    assert obliquity(box.to_quad(), box) == 1.0
    assert obliquity([[5, 0], [10, 5], [5, 10], [0, 5]], box) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        obliquity([[5, -3], [10, 5], [5, 10], [0, 5]], box)
