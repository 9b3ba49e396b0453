"""
Simulation Service Module

Synthetic rotated-rectangle scenes and the representation studies run on
them: angle-versus-offset noise robustness, vertex-order discontinuity and
the benefit of obliquity-guided selection.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from src.core import representation
from src.core.geometry import (
    Quad,
    RBox,
    aabb,
    convex_hull,
    orient,
    iou,
    min_area_rect,
    prepare_polygon,
    prepared_iou,
    rbox_to_quad,
    rotate_points,
)
from src.core.representation import SelectionPolicy
from src.errors import DegenerateGeometryError, InvalidInputError
from src.services.dataio_service import DetDataset, DetRecord, GtDataset, GtRecord
from src.services.evaluation_service import mean_average_precision

KINDS = ("rbox", "vertex", "gliding")

# placement attempts per object before a scene gives up on it
MAX_ATTEMPTS = 200

# short side of the rectangles used by the sweeps; IoU is scale free
SWEEP_SIDE = 16.0


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int] = (256, 256)
    count_range: Tuple[int, int] = (3, 6)
    aspect_range: Tuple[float, float] = (1.5, 5.0)
    size_range: Tuple[float, float] = (32.0, 80.0)
    horizontal_fraction: float = 0.3
    overlap_cap: float = 0.2
    classes: Tuple[str, ...] = ("plane", "ship")
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise InvalidInputError(f"count_range must satisfy 0 <= lo <= hi, got {self.count_range}")
        for name in ("aspect_range", "size_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise InvalidInputError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if min(self.image_size) <= 0:
            raise InvalidInputError(f"image_size must be positive, got {self.image_size}")
        if not (0.0 <= self.overlap_cap < 1.0):
            raise InvalidInputError(f"overlap_cap must lie in [0, 1), got {self.overlap_cap}")
        if not (0.0 <= self.horizontal_fraction <= 1.0):
            raise InvalidInputError(f"horizontal_fraction must lie in [0, 1], got {self.horizontal_fraction}")
        if not self.classes:
            raise InvalidInputError("at least one class is required")


@dataclass(frozen=True)
class PerturbSpec:
    """Noise of one representation kind.

    epsilon is an angle in radians for rbox, a fraction of the local side
    length for vertex and an absolute bound on each alpha for gliding.
    """

    kind: str
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"kind must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise InvalidInputError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class SweepCell:
    kind: str
    aspect: float
    epsilon: float
    mean_iou: float
    std_iou: float
    trials: int


@dataclass
class DiscontinuityReport:
    angles: npt.NDArray[np.float64]
    vertex_jumps: npt.NDArray[np.float64]
    gliding_jumps: npt.NDArray[np.float64]
    aligned: npt.NDArray[np.bool_]

    @property
    def vertex_max(self) -> float:
        return float(self.vertex_jumps.max()) if self.vertex_jumps.size else 0.0

    @property
    def vertex_max_angle(self) -> float:
        """Start angle (degrees) of the largest vertex-target jump"""
        return float(self.angles[int(np.argmax(self.vertex_jumps))])

    @property
    def gliding_max(self) -> float:
        """Largest gliding jump away from exact axis alignment"""
        jumps = self.gliding_jumps[~self.aligned]
        return float(jumps.max()) if jumps.size else 0.0

    @property
    def gliding_aligned_max(self) -> float:
        jumps = self.gliding_jumps[self.aligned]
        return float(jumps.max()) if jumps.size else 0.0


@dataclass(frozen=True)
class SelectionBenefit:
    map_selected: float
    map_oriented: float
    t_r: float
    iou_thresh: float
    n_objects: int


def child_seed(seed: int, *keys: int) -> int:
    """Independent, reproducible seed for a sub-stream"""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def gen_scene(spec: SceneSpec) -> List[GtRecord]:
    """
    Random rotated rectangles inside the image with bounded mutual overlap

    Args:
        spec: Scene parameters including the seed

    Returns:
        Ground-truth records; the same spec always yields the same scene
    """
    rng = np.random.default_rng(spec.seed)
    width, height = spec.image_size
    target = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    records: List[GtRecord] = []
    prepared = []
    attempts = 0
    while len(records) < target and attempts < MAX_ATTEMPTS * max(target, 1):
        attempts += 1
        w = rng.uniform(*spec.size_range)
        h = w / rng.uniform(*spec.aspect_range)
        if rng.random() < spec.horizontal_fraction:
            # exactly axis-aligned, either orientation
            theta = 0.0
            if rng.random() < 0.5:
                w, h = h, w
        else:
            theta = rng.uniform(-math.pi / 2.0, math.pi / 2.0)
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        half_w = (w * abs(math.cos(theta)) + h * abs(math.sin(theta))) / 2.0
        half_h = (w * abs(math.sin(theta)) + h * abs(math.cos(theta))) / 2.0
        if 2 * half_w >= width or 2 * half_h >= height:
            continue
        cx = rng.uniform(half_w, width - half_w)
        cy = rng.uniform(half_h, height - half_h)
        quad = rbox_to_quad(RBox(cx, cy, w, h, theta))
        quad = np.clip(quad, [0.0, 0.0], [float(width), float(height)])
        candidate = prepare_polygon(quad)
        if any(prepared_iou(candidate, other) > spec.overlap_cap for other in prepared):
            continue
        records.append(GtRecord(quad, cls, False))
        prepared.append(candidate)
    if len(records) < target:
        logging.warning(f"Placed {len(records)} of {target} objects (seed {spec.seed})")
    return records


def gen_dataset(spec: SceneSpec, n_images: int, prefix: str = "img", split: int = 0) -> GtDataset:
    """Scenes keyed ``<prefix>_<index>``; each image draws its own child seed"""
    dataset = {}
    for index in range(n_images):
        image_spec = replace(spec, seed=child_seed(spec.seed, split, index))
        dataset[f"{prefix}_{index:04d}"] = gen_scene(image_spec)
    logging.info(f"Generated {n_images} synthetic images ({sum(len(v) for v in dataset.values())} objects)")
    return dataset


def rotate_records(records: Sequence[GtRecord], angle: float, size: Tuple[int, int]) -> List[GtRecord]:
    """Rotate annotations about the image center; objects leaving the image are dropped"""
    width, height = size
    center = (width / 2.0, height / 2.0)
    out = []
    for record in records:
        quad = rotate_points(record.quad, angle, center)
        if quad[:, 0].min() < 0 or quad[:, 1].min() < 0 or quad[:, 0].max() > width or quad[:, 1].max() > height:
            continue
        out.append(GtRecord(quad, record.cls, record.difficult))
    if len(out) < len(records):
        logging.info(f"Rotation by {math.degrees(angle):.1f} deg dropped {len(records) - len(out)} objects")
    return out


def perturb(gt: Quad, spec: PerturbSpec, rng: Optional[np.random.Generator] = None) -> Quad:
    """
    Perturb a quad through one representation

    Args:
        gt: Object quad
        spec: Kind and magnitude of the noise
        rng: Random stream; a fresh one seeded by spec.seed when omitted

    Returns:
        The perturbed polygon (the convex hull for the vertex kind)
    """
    quad = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if spec.epsilon == 0.0:
        return quad.copy()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.kind == "rbox":
        rb = min_area_rect(quad)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return rbox_to_quad(replace(rb, theta=rb.theta + sign * spec.epsilon))
    if spec.kind == "vertex":
        scale = local_side_scale(quad)
        directions = rng.uniform(0.0, 2.0 * math.pi, size=len(quad))
        offsets = np.stack([np.cos(directions), np.sin(directions)], axis=1) * (spec.epsilon * scale)[:, None]
        try:
            return convex_hull(quad + offsets)
        except DegenerateGeometryError:
            return quad + offsets
    hboxes, alpha, _ = representation.encode_batch(quad[None])
    noisy = np.clip(alpha + rng.uniform(-spec.epsilon, spec.epsilon, size=alpha.shape), 0.0, 1.0)
    return representation.decode_batch(hboxes, noisy)[0]


def local_side_scale(quad: Quad) -> npt.NDArray[np.float64]:
    """Mean length of the two edges meeting at each vertex"""
    edges = np.linalg.norm(np.roll(quad, -1, axis=0) - quad, axis=1)
    return (edges + np.roll(edges, 1)) / 2.0


def angle_displacement(quad: Quad, angle: float) -> float:
    """Mean vertex displacement caused by rotating the minimal rectangle by angle"""
    rb = min_area_rect(quad)
    return math.hypot(rb.w, rb.h) * math.sin(abs(angle) / 2.0)


def matched_epsilon(kind: str, quad: Quad, angle: float) -> float:
    """
    Noise magnitude of a kind that displaces vertices as much, on average,
    as an angle error does

    A uniform alpha error in [-g, g] moves each vertex by g/2 times its box
    side on average; a vertex offset of length e times the local side moves
    it by exactly that.
    """
    if kind == "rbox":
        return abs(angle)
    displacement = angle_displacement(quad, angle)
    if kind == "gliding":
        box = aabb(quad)
        return 4.0 * displacement / (box.w + box.h)
    return displacement / float(np.mean(local_side_scale(quad)))


def robustness_sweep(
    aspects: Sequence[float],
    angle_errors_deg: Sequence[float],
    kinds: Sequence[str] = KINDS,
    trials: int = 1000,
    seed: int = 7,
    max_angle_deg: float = 90.0,
) -> List[SweepCell]:
    """
    Mean IoU between rectangles and their perturbed copies

    Each cell uses the same random rectangles for every kind; the noise of
    non-angle kinds is matched to the cell's angle error by mean vertex
    displacement.

    Args:
        aspects: Rectangle aspect ratios
        angle_errors_deg: Angle errors in degrees
        kinds: Representation kinds to perturb
        trials: Rectangles per cell
        seed: Base seed
        max_angle_deg: Orientations are drawn uniformly from [-max_angle_deg, max_angle_deg)

    Returns:
        One cell per (kind, aspect, angle error), CSV-ready
    """
    if trials < 1:
        raise InvalidInputError(f"trials must be >= 1, got {trials}")
    if not (0.0 < max_angle_deg <= 90.0):
        raise InvalidInputError(f"max_angle_deg must lie in (0, 90], got {max_angle_deg}")
    for kind in kinds:
        if kind not in KINDS:
            raise InvalidInputError(f"unknown kind {kind!r}")
    cells = []
    for a_idx, aspect in enumerate(aspects):
        for e_idx, eps_deg in enumerate(angle_errors_deg):
            angle = math.radians(eps_deg)
            shape_rng = np.random.default_rng(child_seed(seed, a_idx, e_idx))
            limit = math.radians(min(max_angle_deg, 90.0))
            thetas = shape_rng.uniform(-limit, limit, size=trials)
            quads = [rbox_to_quad(RBox(0.0, 0.0, aspect * SWEEP_SIDE, SWEEP_SIDE, t)) for t in thetas]
            for k_idx, kind in enumerate(kinds):
                noise_rng = np.random.default_rng(child_seed(seed, a_idx, e_idx, k_idx + 1))
                values = np.empty(trials)
                for t, quad in enumerate(quads):
                    spec = PerturbSpec(kind, matched_epsilon(kind, quad, angle))
                    values[t] = iou(quad, perturb(quad, spec, noise_rng))
                cells.append(SweepCell(kind, float(aspect), float(eps_deg), float(values.mean()), float(values.std()), trials))
            logging.info(f"Sweep cell aspect={aspect} eps={eps_deg} deg done")
    return cells


def vertex_targets(quad: Quad) -> npt.NDArray[np.float64]:
    """Vertex-regression targets: topmost vertex first (ties to smaller x), then clockwise,
    normalized by the horizontal box"""
    arr = orient(quad)
    ys, xs = arr[:, 1], arr[:, 0]
    start = min(range(4), key=lambda i: (ys[i], xs[i]))
    ordered = np.roll(arr, -start, axis=0)
    box = aabb(arr)
    return ((ordered - [box.x, box.y]) / [box.w, box.h]).ravel()


def vertex_order_discontinuity(aspect: float, angles_deg: Sequence[float]) -> DiscontinuityReport:
    """
    Jumps of regression targets between consecutive angles of a sweep

    Args:
        aspect: Rectangle aspect ratio
        angles_deg: Increasing rotation angles in degrees

    Returns:
        Jump magnitudes of vertex targets and of the length ratios, indexed
        by the first angle of each consecutive pair
    """
    angles = np.asarray(angles_deg, dtype=np.float64)
    if angles.size < 2:
        raise InvalidInputError("the sweep needs at least two angles")
    quads = [rbox_to_quad(RBox(0.0, 0.0, aspect, 1.0, math.radians(a))) for a in angles]
    vertex = np.array([vertex_targets(q) for q in quads])
    _, alpha, _ = representation.encode_batch(np.array(quads))
    vertex_jumps = np.linalg.norm(np.diff(vertex, axis=0), axis=1)
    gliding_jumps = np.linalg.norm(np.diff(alpha, axis=0), axis=1)
    on_axis = np.isclose(np.mod(angles, 90.0), 0.0, atol=1e-9) | np.isclose(np.mod(angles, 90.0), 90.0, atol=1e-9)
    aligned = on_axis[:-1] | on_axis[1:]
    report = DiscontinuityReport(angles[:-1], vertex_jumps, gliding_jumps, aligned)
    logging.info(
        f"Vertex targets jump {report.vertex_max:.4f} at {report.vertex_max_angle:.2f} deg; "
        f"gliding max {report.gliding_max:.4f}"
    )
    return report


def sweep_angles(limit: float = 10.0, step: float = 0.1) -> npt.NDArray[np.float64]:
    """Symmetric angle grid that contains 0 exactly"""
    n = int(round(limit / step))
    return np.arange(-n, n + 1) * step


def noisy_alpha_detections(gts: GtDataset, policy: SelectionPolicy, alpha_noise: float, seed: int) -> DetDataset:
    """Detections with exact boxes and obliquity but noisy length ratios"""
    rng = np.random.default_rng(seed)
    dets: DetDataset = {}
    for image_id in sorted(gts):
        records = []
        for gt in gts[image_id]:
            rep = representation.encode(gt.polygon)
            noise = rng.uniform(-alpha_noise, alpha_noise, size=4)
            score = float(rng.uniform(0.5, 1.0))
            noisy = representation.GlidingRep(rep.hbox, tuple(np.asarray(rep.alpha) + noise), rep.r)
            records.append(DetRecord(gt.cls, score, representation.select(noisy, policy)))
        dets[image_id] = records
    return dets


def selection_benefit(
    gts: GtDataset,
    alpha_noise: float = 0.15,
    t_r: float = 0.8,
    iou_thresh: float = 0.7,
    seed: int = 7,
    mode: str = "voc07",
) -> SelectionBenefit:
    """mAP with obliquity-guided selection against oriented-only output on the same noisy predictions"""
    selected = noisy_alpha_detections(gts, SelectionPolicy(t_r), alpha_noise, seed)
    oriented = noisy_alpha_detections(gts, SelectionPolicy(1.0), alpha_noise, seed)
    map_selected = mean_average_precision(selected, gts, iou_thresh, mode).mean
    map_oriented = mean_average_precision(oriented, gts, iou_thresh, mode).mean
    n_objects = sum(len(v) for v in gts.values())
    logging.info(f"Selection t_r={t_r}: mAP@{iou_thresh} {map_selected:.4f} vs oriented-only {map_oriented:.4f}")
    return SelectionBenefit(map_selected, map_oriented, t_r, iou_thresh, n_objects)
