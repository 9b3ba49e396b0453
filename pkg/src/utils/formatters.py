"""
Formatters Module

Contains formatting functions for reports and CSV tables.
Every float is written with six decimals so reruns are byte-identical.
"""

from typing import Iterable, List, Sequence, Tuple

import numpy as np

from src.config import config
from src.core.representation import GlidingRep
from src.services.evaluation_service import LamrResult, MapResult, PrfResult
from src.services.simulation_service import DiscontinuityReport, SelectionBenefit, SweepCell


def format_float(value: float) -> str:
    return config.output_float_format % value


def _csv(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    return "\n".join(lines) + "\n"


def format_map_report(result: MapResult) -> str:
    """
    Format per-class AP and mAP as a plain-text table

    Args:
        result: Evaluation result

    Returns:
        Report text ending with the mAP line
    """
    width = max([len("class")] + [len(c) for c in result.per_class])
    lines = [
        f"Evaluation at IoU {format_float(result.iou_thresh)} ({result.mode})",
        "",
        f"{'class':<{width}}  AP",
    ]
    for cls in sorted(result.per_class):
        lines.append(f"{cls:<{width}}  {format_float(result.per_class[cls])}")
    lines.append(f"{'mAP':<{width}}  {format_float(result.mean)}")
    return "\n".join(lines) + "\n"


def format_map_csv(result: MapResult) -> str:
    rows = [(cls, format_float(result.per_class[cls])) for cls in sorted(result.per_class)]
    rows.append(("mAP", format_float(result.mean)))
    return _csv(("class", "ap"), rows)


def format_pr_curve_csv(result: MapResult) -> str:
    rows = []
    for cls in sorted(result.curves):
        curve = result.curves[cls]
        rows.extend((cls, format_float(r), format_float(p)) for r, p in zip(curve.recall, curve.precision))
    return _csv(("class", "recall", "precision"), rows)


def format_prf_report(result: PrfResult, iou_thresh: float) -> str:
    return (
        f"Evaluation at IoU {format_float(iou_thresh)}\n"
        f"\n"
        f"Precision: {format_float(result.precision)}\n"
        f"Recall: {format_float(result.recall)}\n"
        f"F-measure: {format_float(result.f_measure)}\n"
        f"Matched: {result.n_matched} of {result.n_detections} detections and {result.n_ground_truth} objects\n"
    )


def format_lamr_report(result: LamrResult) -> str:
    lines = [f"Log-average miss rate over {result.n_images} images", "", "fppi      miss_rate"]
    for ref, mr in zip(result.references, result.sampled):
        lines.append(f"{format_float(ref)}  {format_float(mr)}")
    lines.append(f"LAMR: {format_float(result.lamr)}")
    return "\n".join(lines) + "\n"


def format_lamr_csv(result: LamrResult) -> str:
    rows = [(format_float(f), format_float(m)) for f, m in zip(result.fppi, result.miss_rate)]
    return _csv(("fppi", "miss_rate"), rows)


def format_sweep_csv(cells: Sequence[SweepCell]) -> str:
    rows = [
        (c.kind, format_float(c.aspect), format_float(c.epsilon), format_float(c.mean_iou), format_float(c.std_iou), str(c.trials))
        for c in cells
    ]
    return _csv(("kind", "aspect", "epsilon", "mean_iou", "std_iou", "trials"), rows)


def format_sweep_table(cells: Sequence[SweepCell]) -> str:
    """Mean IoU with one row per (aspect, angle error) and one column per kind"""
    kinds: List[str] = []
    for c in cells:
        if c.kind not in kinds:
            kinds.append(c.kind)
    table = {(c.aspect, c.epsilon, c.kind): c.mean_iou for c in cells}
    keys = sorted({(c.aspect, c.epsilon) for c in cells})
    lines = ["aspect     epsilon    " + "  ".join(f"{k:>9}" for k in kinds)]
    for aspect, epsilon in keys:
        values = "  ".join(f"{format_float(table[(aspect, epsilon, k)]):>9}" for k in kinds if (aspect, epsilon, k) in table)
        lines.append(f"{format_float(aspect):<10} {format_float(epsilon):<10} {values}")
    return "\n".join(lines) + "\n"


def format_discontinuity_csv(report: DiscontinuityReport) -> str:
    rows = [
        (format_float(a), format_float(v), format_float(g), str(int(aligned)))
        for a, v, g, aligned in zip(report.angles, report.vertex_jumps, report.gliding_jumps, report.aligned)
    ]
    return _csv(("angle", "vertex_jump", "gliding_jump", "aligned"), rows)


def format_discontinuity_report(report: DiscontinuityReport) -> str:
    return (
        f"Largest vertex-target jump: {format_float(report.vertex_max)} at {format_float(report.vertex_max_angle)} deg\n"
        f"Largest gliding jump: {format_float(report.gliding_max)}\n"
        f"Largest gliding jump at axis alignment: {format_float(report.gliding_aligned_max)}\n"
    )


def format_selection_report(benefit: SelectionBenefit) -> str:
    return (
        f"Objects: {benefit.n_objects}\n"
        f"mAP@{format_float(benefit.iou_thresh)} with selection (t_r={format_float(benefit.t_r)}): {format_float(benefit.map_selected)}\n"
        f"mAP@{format_float(benefit.iou_thresh)} oriented only: {format_float(benefit.map_oriented)}\n"
    )


def format_loss_trace_csv(losses: Sequence[float], learning_rates: Sequence[float]) -> str:
    rows = [(str(step), format_float(loss), format_float(lr)) for step, (loss, lr) in enumerate(zip(losses, learning_rates))]
    return _csv(("step", "loss", "learning_rate"), rows)


REP_COLUMNS = ("x", "y", "w", "h", "alpha1", "alpha2", "alpha3", "alpha4", "r")


def format_reps_csv(keys: Sequence[Tuple[str, str]], reps: Sequence[GlidingRep]) -> str:
    """One row per record: image id, class and the nine representation values"""
    rows = ([image_id, cls] + [format_float(v) for v in rep.as_array()] for (image_id, cls), rep in zip(keys, reps))
    return _csv(("image_id", "class") + REP_COLUMNS, rows)


def format_rep_text(rep: GlidingRep) -> str:
    box = rep.hbox
    alpha = ", ".join(format_float(a) for a in rep.alpha)
    return (
        f"Horizontal box: x={format_float(box.x)} y={format_float(box.y)} w={format_float(box.w)} h={format_float(box.h)}\n"
        f"Length ratios: {alpha}\n"
        f"Obliquity: {format_float(rep.r)}"
    )


def format_quad(quad) -> str:
    return " ".join(format_float(v) for v in np.asarray(quad, dtype=np.float64).ravel())
