import math

import numpy as np
import pytest

from src.errors import InvalidInputError
from src.services.dataio_service import DetRecord, GtRecord
from src.services.evaluation_service import (
    PrCurve,
    average_precision,
    count_matches,
    f_measure,
    lamr,
    match,
    mean_average_precision,
)
from src.services.simulation_service import PerturbSpec, SceneSpec, gen_dataset, perturb


def _box(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _fixture():
    """Three images worked out by hand.

    plane, IoU 0.5, by score: d1 TP, d2 FP (duplicate), d3 TP (IoU 2/3),
    d4 ignored (difficult), d5 FP (no plane in img3), d6 TP; 3 planes.
    ship: one exact detection of the only ship.
    """
    gts = {
        "img1": [GtRecord(_box(0, 0, 10, 10), "plane"), GtRecord(_box(20, 0, 30, 10), "plane")],
        "img2": [GtRecord(_box(0, 0, 10, 10), "plane"), GtRecord(_box(50, 50, 60, 60), "plane", True)],
        "img3": [GtRecord(_box(0, 0, 10, 10), "ship")],
    }
    dets = {
        "img1": [
            DetRecord("plane", 0.9, _box(0, 0, 10, 10)),
            DetRecord("plane", 0.8, _box(0, 0, 10, 10)),
            DetRecord("plane", 0.4, _box(20, 0, 30, 10)),
        ],
        "img2": [
            DetRecord("plane", 0.7, _box(2, 0, 12, 10)),
            DetRecord("plane", 0.6, _box(50, 50, 60, 60)),
        ],
        "img3": [
            DetRecord("plane", 0.5, _box(0, 0, 10, 10)),
            DetRecord("ship", 0.95, _box(0, 0, 10, 10)),
        ],
    }
    return dets, gts


def test_fixture_voc07_map():
    dets, gts = _fixture()
    result = mean_average_precision(dets, gts, 0.5, "voc07")
    assert result.per_class["plane"] == pytest.approx(8.4 / 11.0, abs=1e-12)
    assert result.per_class["ship"] == 1.0
    assert result.mean == pytest.approx((8.4 / 11.0 + 1.0) / 2.0, abs=1e-12)


def test_fixture_all_points_map():
    dets, gts = _fixture()
    result = mean_average_precision(dets, gts, 0.5, "all-points")
    assert result.per_class["plane"] == pytest.approx(34.0 / 45.0, abs=1e-12)
    assert result.mean == pytest.approx((34.0 / 45.0 + 1.0) / 2.0, abs=1e-12)


def test_fixture_strict_threshold():
    dets, gts = _fixture()
    strict = mean_average_precision(dets, gts, 0.7, "all-points")
    assert strict.per_class["plane"] == pytest.approx(7.0 / 15.0, abs=1e-12)
    for mode in ("voc07", "all-points"):
        assert mean_average_precision(dets, gts, 0.7, mode).mean <= mean_average_precision(dets, gts, 0.5, mode).mean


def test_fixture_pr_curve():
    dets, gts = _fixture()
    curve = mean_average_precision(dets, gts, 0.5).curves["plane"]
    np.testing.assert_allclose(curve.recall, [1 / 3, 1 / 3, 2 / 3, 2 / 3, 1.0])
    np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3, 0.5, 0.6])


def test_match_flags():
    dets, gts = _fixture()
    plane_dets = [(i, d) for i in sorted(dets) for d in dets[i] if d.cls == "plane"]
    plane_gts = {i: [g for g in gts[i] if g.cls == "plane"] for i in gts}
    result = match(plane_dets, plane_gts, 0.5)
    np.testing.assert_array_equal(result.scores, [0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    np.testing.assert_array_equal(result.tp, [True, False, True, False, False, True])
    np.testing.assert_array_equal(result.fp, [False, True, False, False, True, False])
    np.testing.assert_array_equal(result.ignored, [False, False, False, True, False, False])
    assert result.n_positive == 3


def test_match_is_inclusive_at_threshold():
    gts = {"a": [GtRecord(_box(0, 0, 2, 2), "plane")]}
    dets = [("a", DetRecord("plane", 0.5, _box(1, 0, 3, 2)))]
    assert match(dets, gts, 2.0 / 6.0).tp[0]
    assert not match(dets, gts, 0.34).tp[0]


def test_class_without_detections_scores_zero():
    gts = {"a": [GtRecord(_box(0, 0, 2, 2), "plane"), GtRecord(_box(5, 5, 7, 7), "ship")]}
    dets = {"a": [DetRecord("plane", 0.9, _box(0, 0, 2, 2))]}
    result = mean_average_precision(dets, gts)
    assert result.per_class == {"plane": 1.0, "ship": 0.0}
    assert result.mean == 0.5


def test_classes_with_only_difficult_objects_are_skipped():
    gts = {"a": [GtRecord(_box(0, 0, 2, 2), "plane"), GtRecord(_box(5, 5, 7, 7), "ship", True)]}
    result = mean_average_precision({}, gts)
    assert list(result.per_class) == ["plane"]


def test_average_precision_edge_cases():
    empty = PrCurve(np.array([]), np.array([]), "plane", 0.5)
    assert average_precision(empty, "voc07") == 0.0
    perfect = PrCurve(np.array([0.5, 1.0]), np.array([1.0, 1.0]), "plane", 0.5)
    assert average_precision(perfect, "voc07") == pytest.approx(1.0)
    assert average_precision(perfect, "all-points") == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        average_precision(perfect, "coco")


def test_fixture_f_measure():
    dets, gts = _fixture()
    result = f_measure(dets, gts, 0.5)
    assert (result.n_matched, result.n_detections, result.n_ground_truth) == (4, 6, 4)
    assert result.precision == pytest.approx(2.0 / 3.0)
    assert result.recall == 1.0
    assert result.f_measure == pytest.approx(0.8)


def test_f_measure_without_detections():
    _, gts = _fixture()
    result = f_measure({}, gts, 0.5)
    assert (result.precision, result.recall, result.f_measure) == (0.0, 0.0, 0.0)


def test_count_matches_is_one_to_one():
    gt = [_box(0, 0, 10, 10)]
    assert count_matches([_box(0, 0, 10, 10), _box(0, 0, 10, 10)], gt, 0.5) == 1
    assert count_matches([], gt, 0.5) == 0


def test_fixture_lamr():
    dets, gts = _fixture()
    result = lamr(dets, gts, 0.5)
    np.testing.assert_allclose(result.fppi, [0, 0, 0, 1 / 3, 1 / 3, 2 / 3, 2 / 3])
    np.testing.assert_allclose(result.miss_rate, [1.0, 0.75, 0.5, 0.5, 0.25, 0.25, 0.0])
    np.testing.assert_allclose(result.sampled, [0.5] * 7 + [0.25, 0.0])
    expected = math.exp((7 * math.log(0.5) + math.log(0.25) + math.log(1e-10)) / 9)
    assert result.lamr == pytest.approx(expected)
    assert result.n_images == 3


def test_lamr_needs_positives():
    with pytest.raises(InvalidInputError):
        lamr({}, {"a": [GtRecord(_box(0, 0, 2, 2), "plane", True)]})


def test_lamr_counts_detections_of_unannotated_classes():
    gts = {"a": [GtRecord(_box(0, 0, 10, 10), "person")]}
    exact = {"a": [DetRecord("person", 0.9, _box(0, 0, 10, 10))]}
    assert lamr(exact, gts).lamr == pytest.approx(1e-10)

    stray = [DetRecord("cyclist", 0.95, _box(20 + 12 * k, 0, 30 + 12 * k, 10)) for k in range(5)]
    result = lamr({"a": exact["a"] + stray}, gts)
    np.testing.assert_allclose(result.fppi, [0, 1, 2, 3, 4, 5, 5])
    np.testing.assert_allclose(result.miss_rate, [1, 1, 1, 1, 1, 1, 0])
    assert result.lamr == pytest.approx(1.0)


def test_lower_score_duplicate_never_raises_ap():
    dets, gts = _fixture()
    for mode in ("voc07", "all-points"):
        base = mean_average_precision(dets, gts, 0.5, mode).per_class
        for image_id, records in dets.items():
            for record in records:
                copy = DetRecord(record.cls, record.score - 0.01, record.quad)
                extended = {k: list(v) for k, v in dets.items()}
                extended[image_id].append(copy)
                after = mean_average_precision(extended, gts, 0.5, mode).per_class
                assert after[record.cls] <= base[record.cls] + 1e-12


def _synthetic_run(seed, angle_deg):
    gts = gen_dataset(SceneSpec(seed=seed), 6)
    rng = np.random.default_rng(seed)
    noise = PerturbSpec("rbox", math.radians(angle_deg))
    dets = {
        image_id: [DetRecord(g.cls, float(rng.uniform(0.1, 1.0)), perturb(g.polygon, noise, rng)) for g in records]
        for image_id, records in gts.items()
    }
    first = next(iter(dets))
    dets[first].append(DetRecord("plane", 0.99, _box(0, 0, 12, 12)))
    return dets, gts


def test_stricter_threshold_never_raises_map():
    for seed in (1, 2, 3):
        dets, gts = _synthetic_run(seed, 12.0)
        for mode in ("voc07", "all-points"):
            loose = mean_average_precision(dets, gts, 0.5, mode).mean
            strict = mean_average_precision(dets, gts, 0.7, mode).mean
            assert strict <= loose


def test_swapping_detections_and_ground_truth_swaps_precision_and_recall():
    dets, gts = _synthetic_run(4, 20.0)
    forward = f_measure(dets, gts, 0.5)
    swapped_dets = {k: [DetRecord(g.cls, 1.0, g.quad) for g in v] for k, v in gts.items()}
    swapped_gts = {k: [GtRecord(d.quad, d.cls) for d in v] for k, v in dets.items()}
    backward = f_measure(swapped_dets, swapped_gts, 0.5)
    assert backward.precision == pytest.approx(forward.recall)
    assert backward.recall == pytest.approx(forward.precision)
    assert backward.f_measure == pytest.approx(forward.f_measure)
