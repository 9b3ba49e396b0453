"""
Tool Service Module

Backs the MCP tools. Every method returns text; library errors are
reported as "Error: ..." strings instead of being raised to the client.
"""

import logging
from typing import List

import numpy as np

from src.core import geometry, representation
from src.core.geometry import HBox
from src.core.nms import ScoredPoly, batched_oriented_nms
from src.errors import GlidingError, InvalidInputError
from src.services import dataio_service
from src.services.evaluation_service import mean_average_precision
from src.utils.formatters import format_map_report, format_quad, format_rep_text
from src.utils.validators import validate_ap_mode, validate_unit_interval


def _quad(coords: List[float]) -> np.ndarray:
    if len(coords) != 8:
        raise InvalidInputError(f"a quadrangle needs 8 coordinates, got {len(coords)}")
    return np.asarray(coords, dtype=np.float64).reshape(4, 2)


class ToolService:
    """Service class for the gliding-vertex tools"""

    @staticmethod
    async def encode_polygon(coords: List[float]) -> str:
        """
        Encode a quadrangle as horizontal box, length ratios and obliquity

        Args:
            coords: x1 y1 x2 y2 x3 y3 x4 y4

        Returns:
            Formatted representation string
        """
        try:
            rep = representation.encode(_quad(coords))
        except GlidingError as exc:
            return f"Error: {exc}"
        return format_rep_text(rep)

    @staticmethod
    async def decode_representation(x: float, y: float, w: float, h: float, alpha: List[float], r: float, t_r: float = 1.0) -> str:
        error = validate_unit_interval("t_r", t_r)
        if error:
            return f"Error: {error}"
        try:
            rep = representation.GlidingRep(HBox(x, y, w, h), tuple(alpha), r)
            quad = representation.select(rep, representation.SelectionPolicy(t_r))
        except GlidingError as exc:
            return f"Error: {exc}"
        return format_quad(quad)

    @staticmethod
    async def polygon_iou(first: List[float], second: List[float]) -> str:
        try:
            value = geometry.iou(geometry.make_quad(_quad(first)), geometry.make_quad(_quad(second)))
        except GlidingError as exc:
            return f"Error: {exc}"
        return f"IoU: {value:.6f}"

    @staticmethod
    async def suppress_detections(detections: str, iou_threshold: float = 0.5) -> str:
        """
        Per-class oriented NMS over detection lines

        Args:
            detections: Lines of "class score x1 y1 ... x4 y4"
            iou_threshold: Suppression threshold

        Returns:
            Kept detections in the same format, highest score first
        """
        error = validate_unit_interval("iou_threshold", iou_threshold)
        if error:
            return f"Error: {error}"
        try:
            records = dataio_service.parse_det_text(detections)
            classes = sorted({r.cls for r in records})
            scored = [ScoredPoly(r.polygon, r.score, classes.index(r.cls) + 1) for r in records]
            kept = batched_oriented_nms(scored, iou_threshold)
        except GlidingError as exc:
            return f"Error: {exc}"
        logging.info(f"Kept {len(kept)} of {len(records)} detections")
        out = [dataio_service.DetRecord(classes[d.cls - 1], d.score, d.poly) for d in kept]
        return dataio_service.emit_det_text(out) or "No detections kept."

    @staticmethod
    async def evaluate_detections(detections: str, ground_truth: str, iou_threshold: float = 0.5, mode: str = "voc07") -> str:
        error = validate_unit_interval("iou_threshold", iou_threshold) or validate_ap_mode(mode)
        if error:
            return f"Error: {error}"
        try:
            dets = dataio_service.parse_concatenated(detections, "det")
            gts = dataio_service.parse_concatenated(ground_truth, "gt")
            result = mean_average_precision(dets, gts, iou_threshold, mode)
        except GlidingError as exc:
            return f"Error: {exc}"
        return format_map_report(result).strip()
