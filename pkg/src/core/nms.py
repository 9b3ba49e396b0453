"""
NMS Module

Greedy oriented non-maximum suppression over polygon detections.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from src.core.geometry import Polygon, prepare_polygon, prepared_iou
from src.errors import InvalidInputError

DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True)
class ScoredPoly:
    poly: Polygon
    score: float
    cls: int = 1

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score must lie in [0, 1], got {self.score}")


def score_order(dets: Sequence[ScoredPoly]) -> List[int]:
    """Indices by descending score; equal scores keep input order"""
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return np.argsort(-scores, kind="stable").tolist()


def oriented_nms(dets: Sequence[ScoredPoly], iou_thresh: float = DEFAULT_NMS_IOU) -> List[ScoredPoly]:
    """Suppress detections of a single class.

    A detection is dropped when it overlaps an already kept one with
    IoU >= iou_thresh; detections that do not overlap at all are always
    kept, so a threshold of 0 keeps exactly the non-overlapping ones.
    """
    if not (0.0 <= iou_thresh <= 1.0):
        raise InvalidInputError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")
    if not dets:
        return []
    prepared = [prepare_polygon(d.poly) for d in dets]
    kept: List[int] = []
    for i in score_order(dets):
        suppressed = False
        for j in kept:
            overlap = prepared_iou(prepared[i], prepared[j])
            if overlap > 0.0 and overlap >= iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    logging.debug(f"oriented NMS kept {len(kept)} of {len(dets)} detections (iou >= {iou_thresh})")
    return [dets[i] for i in kept]


def batched_oriented_nms(dets: Sequence[ScoredPoly], iou_thresh: float = DEFAULT_NMS_IOU) -> List[ScoredPoly]:
    """Per-class oriented NMS; the merged output is sorted by descending score"""
    by_class: Dict[int, List[ScoredPoly]] = defaultdict(list)
    for det in dets:
        by_class[det.cls].append(det)
    kept: List[ScoredPoly] = []
    for cls in sorted(by_class):
        kept.extend(oriented_nms(by_class[cls], iou_thresh))
    return [kept[i] for i in score_order(kept)]
