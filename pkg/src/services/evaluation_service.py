"""
Evaluation Service Module

Oriented detection metrics: VOC-style mAP, precision/recall/F-measure and
log-average miss rate over false positives per image.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.optimize import linear_sum_assignment

from src.core.geometry import prepare_polygon, prepared_iou
from src.errors import InvalidInputError
from src.services.dataio_service import DetDataset, DetRecord, GtDataset, GtRecord
from src.utils.validators import AP_MODES

# miss rates are floored here before taking logs
MR_FLOOR = 1e-10

LAMR_REFERENCES = np.logspace(-2.0, 0.0, 9)

ImageDet = Tuple[str, DetRecord]


@dataclass
class MatchResult:
    """Greedy matching of one class; detection arrays follow score order"""

    image_ids: List[str]
    scores: npt.NDArray[np.float64]
    tp: npt.NDArray[np.bool_]
    fp: npt.NDArray[np.bool_]
    matched_gt: List[Optional[int]]
    gt_matched: Dict[str, npt.NDArray[np.bool_]]
    n_positive: int

    @property
    def ignored(self) -> npt.NDArray[np.bool_]:
        """Detections matched to difficult objects count as neither TP nor FP"""
        return ~(self.tp | self.fp)


@dataclass
class PrCurve:
    recall: npt.NDArray[np.float64]
    precision: npt.NDArray[np.float64]
    cls: str
    iou_thresh: float
    n_positive: int = 0


@dataclass
class MapResult:
    per_class: Dict[str, float]
    mean: float
    iou_thresh: float
    mode: str
    curves: Dict[str, PrCurve] = field(default_factory=dict, repr=False)


@dataclass
class PrfResult:
    precision: float
    recall: float
    f_measure: float
    n_matched: int
    n_detections: int
    n_ground_truth: int


@dataclass
class LamrResult:
    fppi: npt.NDArray[np.float64]
    miss_rate: npt.NDArray[np.float64]
    references: npt.NDArray[np.float64]
    sampled: npt.NDArray[np.float64]
    lamr: float
    n_images: int


def _check_thresh(iou_thresh: float) -> None:
    if not (0.0 <= iou_thresh <= 1.0):
        raise InvalidInputError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")


def match(dets: Sequence[ImageDet], gts: Dict[str, Sequence[GtRecord]], iou_thresh: float = 0.5) -> MatchResult:
    """
    Greedy highest-score-first matching of one class

    Args:
        dets: (image_id, detection) pairs; sorted by descending score (ties keep input order)
        gts: Ground truth of the same class keyed by image id
        iou_thresh: A detection is a true positive when IoU >= iou_thresh

    Returns:
        Per-detection TP/FP flags and per-object matched flags
    """
    _check_thresh(iou_thresh)
    order = np.argsort(-np.array([d.score for _, d in dets], dtype=np.float64), kind="stable")
    dets = [dets[i] for i in order]
    prepared = {image_id: [prepare_polygon(g.polygon) for g in records] for image_id, records in gts.items()}
    gt_matched = {image_id: np.zeros(len(records), dtype=bool) for image_id, records in gts.items()}
    n_positive = sum(1 for records in gts.values() for g in records if not g.difficult)

    n = len(dets)
    tp = np.zeros(n, dtype=bool)
    fp = np.zeros(n, dtype=bool)
    matched_gt: List[Optional[int]] = [None] * n
    for k, (image_id, det) in enumerate(dets):
        candidates = prepared.get(image_id, [])
        if not candidates:
            fp[k] = True
            continue
        det_poly = prepare_polygon(det.polygon)
        overlaps = [prepared_iou(det_poly, g) for g in candidates]
        best = int(np.argmax(overlaps))
        if _is_hit(overlaps[best], iou_thresh):
            if gts[image_id][best].difficult:
                matched_gt[k] = best
            elif not gt_matched[image_id][best]:
                gt_matched[image_id][best] = True
                matched_gt[k] = best
                tp[k] = True
            else:
                fp[k] = True
        else:
            fp[k] = True
    return MatchResult(
        image_ids=[image_id for image_id, _ in dets],
        scores=np.array([d.score for _, d in dets], dtype=np.float64),
        tp=tp,
        fp=fp,
        matched_gt=matched_gt,
        gt_matched=gt_matched,
        n_positive=n_positive,
    )


def pr_curve(result: MatchResult, cls: str, iou_thresh: float) -> PrCurve:
    keep = ~result.ignored
    tp = np.cumsum(result.tp[keep]).astype(np.float64)
    fp = np.cumsum(result.fp[keep]).astype(np.float64)
    if result.n_positive > 0:
        recall = tp / result.n_positive
    else:
        recall = np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return PrCurve(recall, precision, cls, iou_thresh, result.n_positive)


def average_precision(curve: PrCurve, mode: str = "voc07") -> float:
    """
    Average precision of a precision/recall curve

    Args:
        curve: Curve in descending score order
        mode: "voc07" (11 recall points) or "all-points" (area under the envelope)

    Returns:
        AP in [0, 1]
    """
    if mode not in AP_MODES:
        raise InvalidInputError(f"mode must be one of {', '.join(AP_MODES)}, got {mode!r}")
    rec, prec = curve.recall, curve.precision
    if rec.size == 0:
        return 0.0
    if mode == "voc07":
        total = 0.0
        # k / 10 keeps the recall points exact for hand-checkable cases
        for k in range(11):
            t = k / 10.0
            above = prec[rec >= t]
            total += float(above.max()) if above.size else 0.0
        return total / 11.0
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _by_class(gts: GtDataset, dets: DetDataset, every_class: bool = False):
    """Group by class; every_class also keeps classes with no non-difficult object"""
    if every_class:
        classes = sorted({g.cls for records in gts.values() for g in records} | {d.cls for records in dets.values() for d in records})
    else:
        classes = sorted({g.cls for records in gts.values() for g in records if not g.difficult})
    gts_by_class: Dict[str, Dict[str, List[GtRecord]]] = {c: {} for c in classes}
    for image_id in sorted(gts):
        for g in gts[image_id]:
            if g.cls in gts_by_class:
                gts_by_class[g.cls].setdefault(image_id, []).append(g)
    dets_by_class: Dict[str, List[ImageDet]] = {c: [] for c in classes}
    for image_id in sorted(dets):
        for d in dets[image_id]:
            if d.cls in dets_by_class:
                dets_by_class[d.cls].append((image_id, d))
    return classes, gts_by_class, dets_by_class


def mean_average_precision(dets: DetDataset, gts: GtDataset, iou_thresh: float = 0.5, mode: str = "voc07") -> MapResult:
    """
    Per-class AP and their mean over classes with at least one non-difficult object

    Args:
        dets: Detections keyed by image id
        gts: Ground truth keyed by image id
        iou_thresh: Matching threshold
        mode: AP interpolation mode

    Returns:
        Per-class AP, mean AP and the PR curves
    """
    classes, gts_by_class, dets_by_class = _by_class(gts, dets)
    per_class: Dict[str, float] = {}
    curves: Dict[str, PrCurve] = {}
    for cls in classes:
        result = match(dets_by_class[cls], gts_by_class[cls], iou_thresh)
        curves[cls] = pr_curve(result, cls, iou_thresh)
        per_class[cls] = average_precision(curves[cls], mode)
    mean = math.fsum(per_class.values()) / len(per_class) if per_class else 0.0
    logging.info(f"mAP@{iou_thresh} ({mode}) = {mean:.6f} over {len(per_class)} classes")
    return MapResult(per_class, mean, iou_thresh, mode, curves)


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn else 0.0


def f_score(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r else 0.0


def _is_hit(overlap: float, iou_thresh: float) -> bool:
    return overlap > 0.0 and overlap >= iou_thresh


def _overlaps_any(poly, others: Sequence, iou_thresh: float) -> bool:
    prepared = prepare_polygon(poly)
    return any(_is_hit(prepared_iou(prepared, prepare_polygon(o)), iou_thresh) for o in others)


def count_matches(polys_a: Sequence, polys_b: Sequence, iou_thresh: float) -> int:
    """Largest one-to-one matching between two polygon sets with IoU >= iou_thresh"""
    if not polys_a or not polys_b:
        return 0
    prepared_b = [prepare_polygon(p) for p in polys_b]
    hits = np.zeros((len(polys_a), len(polys_b)))
    for i, poly in enumerate(polys_a):
        pa = prepare_polygon(poly)
        for j, pb in enumerate(prepared_b):
            hits[i, j] = 1.0 if _is_hit(prepared_iou(pa, pb), iou_thresh) else 0.0
    rows, cols = linear_sum_assignment(hits, maximize=True)
    return int(hits[rows, cols].sum())


def f_measure(dets: DetDataset, gts: GtDataset, iou_thresh: float = 0.5) -> PrfResult:
    """
    Precision, recall and F-measure under one-to-one matching

    Detections and objects only match within the same image and class.
    Difficult objects are removed together with the detections they
    would match.
    """
    _check_thresh(iou_thresh)
    n_matched = n_dets = n_gts = 0
    for image_id in sorted(set(dets) | set(gts)):
        image_dets = dets.get(image_id, [])
        image_gts = gts.get(image_id, [])
        for cls in sorted({d.cls for d in image_dets} | {g.cls for g in image_gts}):
            cls_dets = [d.polygon for d in image_dets if d.cls == cls]
            easy = [g.polygon for g in image_gts if g.cls == cls and not g.difficult]
            hard = [g.polygon for g in image_gts if g.cls == cls and g.difficult]
            if hard and cls_dets:
                cls_dets = [d for d in cls_dets if _overlaps_any(d, easy, iou_thresh) or not _overlaps_any(d, hard, iou_thresh)]
            n_matched += count_matches(cls_dets, easy, iou_thresh)
            n_dets += len(cls_dets)
            n_gts += len(easy)
    p = precision(n_matched, n_dets - n_matched)
    r = recall(n_matched, n_gts - n_matched)
    f = f_score(p, r)
    logging.info(f"P={p:.6f} R={r:.6f} F={f:.6f} ({n_matched} matched, {n_dets} detections, {n_gts} objects)")
    return PrfResult(p, r, f, n_matched, n_dets, n_gts)


def lamr(dets: DetDataset, gts: GtDataset, iou_thresh: float = 0.5, n_images: Optional[int] = None) -> LamrResult:
    """
    Miss rate against false positives per image, and its log-average

    Args:
        dets: Detections with scores keyed by image id
        gts: Ground truth keyed by image id
        iou_thresh: Matching threshold
        n_images: Image count for FPPI; defaults to every image id seen

    Returns:
        The FPPI/miss-rate curve, the nine sampled miss rates and the LAMR
    """
    if n_images is None:
        n_images = len(set(dets) | set(gts))
    if n_images < 1:
        raise InvalidInputError("LAMR needs at least one image")
    # detections of classes without ground truth are false positives
    classes, gts_by_class, dets_by_class = _by_class(gts, dets, every_class=True)
    n_positive = 0
    scores: List[float] = []
    tps: List[bool] = []
    fps: List[bool] = []
    for cls in classes:
        result = match(dets_by_class[cls], gts_by_class[cls], iou_thresh)
        n_positive += result.n_positive
        keep = ~result.ignored
        scores.extend(result.scores[keep].tolist())
        tps.extend(result.tp[keep].tolist())
        fps.extend(result.fp[keep].tolist())
    if n_positive == 0:
        raise InvalidInputError("LAMR needs at least one non-difficult object")
    order = np.argsort(-np.array(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(np.array(tps, dtype=np.float64)[order])
    fp = np.cumsum(np.array(fps, dtype=np.float64)[order])
    # the curve starts before any detection is accepted
    fppi = np.concatenate(([0.0], fp / n_images))
    miss_rate = np.concatenate(([1.0], 1.0 - tp / n_positive))
    sampled = np.empty(LAMR_REFERENCES.size)
    for k, ref in enumerate(LAMR_REFERENCES):
        idx = np.where(fppi <= ref)[0]
        sampled[k] = miss_rate[idx[-1]]
    value = float(np.exp(np.mean(np.log(np.maximum(sampled, MR_FLOOR)))))
    logging.info(f"LAMR = {value:.6f} over {n_images} images")
    return LamrResult(fppi, miss_rate, LAMR_REFERENCES.copy(), sampled, value, n_images)
