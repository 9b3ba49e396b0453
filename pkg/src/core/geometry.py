"""
Geometry Module

Exact 2-D polygon primitives on image coordinates (y grows downward):
areas, bounding boxes, convex clipping, IoU and rotated-box conversion.

Polygons are ``(k, 2)`` float arrays. The canonical vertex orientation is
clockwise on screen, which is a positive shoelace sum under y-down.
"""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import ConvexHull, QhullError

from src.errors import DegenerateGeometryError, InvalidInputError

Point = Tuple[float, float]
Polygon = npt.NDArray[np.float64]
Quad = npt.NDArray[np.float64]

# clip results below this area are empty
EMPTY_AREA = 1e-12


@dataclass(frozen=True)
class HBox:
    """Axis-aligned box given by its center and size"""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"HBox values must be finite, got {values}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateGeometryError(f"HBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @classmethod
    def from_bounds(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "HBox":
        return cls((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, xmax - xmin, ymax - ymin)

    @property
    def xmin(self) -> float:
        return self.x - self.w / 2.0

    @property
    def xmax(self) -> float:
        return self.x + self.w / 2.0

    @property
    def ymin(self) -> float:
        return self.y - self.h / 2.0

    @property
    def ymax(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def corners(self) -> Quad:
        """Corners TL, TR, BR, BL"""
        x0, x1, y0, y1 = self.xmin, self.xmax, self.ymin, self.ymax
        return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)

    def to_quad(self) -> Quad:
        return self.corners()


@dataclass(frozen=True)
class RBox:
    """Rotated rectangle; theta is normalized into [-pi/2, pi/2)"""

    x: float
    y: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        values = (self.x, self.y, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"RBox values must be finite, got {values}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateGeometryError(f"RBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))


def normalize_angle(theta: float) -> float:
    """Map an angle onto [-pi/2, pi/2); a rectangle is symmetric under a half turn."""
    wrapped = math.fmod(theta + math.pi / 2.0, math.pi)
    if wrapped < 0:
        wrapped += math.pi
    return wrapped - math.pi / 2.0


def _as_polygon(poly) -> Polygon:
    arr = np.asarray(poly, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        arr = arr.reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("polygon coordinates must be finite")
    return arr


def signed_area(poly) -> float:
    """Shoelace sum / 2; positive for clockwise-on-screen polygons"""
    arr = _as_polygon(poly)
    x, y = arr[:, 0], arr[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def area(poly) -> float:
    return abs(signed_area(poly))


def orient(poly) -> Polygon:
    """Return the polygon with canonical (positive) orientation"""
    arr = _as_polygon(poly)
    if signed_area(arr) < 0:
        return arr[::-1].copy()
    return arr


def aabb(poly) -> HBox:
    arr = _as_polygon(poly)
    if len(arr) < 3:
        raise InvalidInputError(f"need at least 3 vertices, got {len(arr)}")
    xmin, ymin = arr.min(axis=0)
    xmax, ymax = arr.max(axis=0)
    if xmax - xmin <= 0 or ymax - ymin <= 0:
        raise DegenerateGeometryError(
            f"polygon has zero extent ({xmax - xmin:g} x {ymax - ymin:g})"
        )
    return HBox.from_bounds(float(xmin), float(ymin), float(xmax), float(ymax))


def is_convex(poly) -> bool:
    arr = _as_polygon(poly)
    edges = np.roll(arr, -1, axis=0) - arr
    turns = edges[:, 0] * np.roll(edges[:, 1], -1) - edges[:, 1] * np.roll(edges[:, 0], -1)
    scale = float(np.max(np.abs(arr))) if arr.size else 0.0
    tol = 1e-12 * max(scale, 1.0) ** 2
    if np.all(np.abs(turns) <= tol):
        return False
    return bool(np.all(turns >= -tol) or np.all(turns <= tol))


def convex_hull(points) -> Polygon:
    """Convex hull of a point set in canonical orientation"""
    arr = _as_polygon(points)
    if len(np.unique(arr, axis=0)) < 3:
        raise DegenerateGeometryError("convex hull needs at least 3 distinct points")
    try:
        hull = ConvexHull(arr)
    except QhullError as exc:
        raise DegenerateGeometryError("points are collinear") from exc
    return orient(arr[hull.vertices])


def make_quad(points) -> Quad:
    """Validate and canonicalize a quadrangle.

    Convex quads are re-oriented; self-intersecting ones are repaired by
    their convex hull when the hull keeps all four vertices.
    """
    arr = _as_polygon(points)
    if arr.shape != (4, 2):
        raise InvalidInputError(f"a quad needs exactly 4 vertices, got {len(arr)}")
    if is_convex(arr):
        return orient(arr)
    hull = convex_hull(arr)
    if len(hull) != 4:
        raise DegenerateGeometryError("quad is concave or degenerate (convex hull has 3 vertices)")
    return hull


class PreparedPolygon(NamedTuple):
    points: List[Point]
    area: float
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    key: Tuple[float, ...]


def prepare_polygon(poly) -> PreparedPolygon:
    arr = orient(poly)
    xmin, ymin = arr.min(axis=0)
    xmax, ymax = arr.max(axis=0)
    points = [(float(px), float(py)) for px, py in arr]
    return PreparedPolygon(
        points=points,
        area=_points_area(points),
        xmin=float(xmin),
        ymin=float(ymin),
        xmax=float(xmax),
        ymax=float(ymax),
        key=tuple(arr.ravel().tolist()),
    )


def _clip_points(subject: Sequence[Point], clip: Sequence[Point]) -> List[Point]:
    # Sutherland-Hodgman; both polygons convex with positive orientation
    output = list(subject)
    cx1, cy1 = clip[-1]
    for cx2, cy2 in clip:
        if not output:
            break
        ex, ey = cx2 - cx1, cy2 - cy1
        candidates = output
        output = []
        sx, sy = candidates[-1]
        s_side = ex * (sy - cy1) - ey * (sx - cx1)
        for px, py in candidates:
            p_side = ex * (py - cy1) - ey * (px - cx1)
            if p_side >= 0:
                if s_side < 0:
                    t = s_side / (s_side - p_side)
                    output.append((sx + t * (px - sx), sy + t * (py - sy)))
                output.append((px, py))
            elif s_side >= 0:
                t = s_side / (s_side - p_side)
                output.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, s_side = px, py, p_side
        cx1, cy1 = cx2, cy2
    return output


def _points_area(points: Sequence[Point]) -> float:
    if len(points) < 3:
        return 0.0
    total = 0.0
    px, py = points[-1]
    for qx, qy in points:
        total += px * qy - qx * py
        px, py = qx, qy
    return abs(total) / 2.0


def clip_convex(subject, clip) -> Polygon:
    """Intersection of two convex polygons; an empty (0, 2) array when they do not overlap."""
    a, b = prepare_polygon(subject), prepare_polygon(clip)
    points = _clip_points(a.points, b.points)
    if _points_area(points) < EMPTY_AREA:
        return np.empty((0, 2), dtype=np.float64)
    return np.array(points, dtype=np.float64)


def prepared_iou(a: PreparedPolygon, b: PreparedPolygon) -> float:
    if a.xmax <= b.xmin or b.xmax <= a.xmin or a.ymax <= b.ymin or b.ymax <= a.ymin:
        return 0.0
    # fixed operand order keeps iou(a, b) == iou(b, a) bit for bit
    if b.key < a.key:
        a, b = b, a
    inter = _points_area(_clip_points(a.points, b.points))
    if inter < EMPTY_AREA:
        return 0.0
    union = a.area + b.area - inter
    if union <= EMPTY_AREA:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou(a, b) -> float:
    return prepared_iou(prepare_polygon(a), prepare_polygon(b))


def pairwise_iou(polys_a: Sequence, polys_b: Sequence) -> npt.NDArray[np.float64]:
    """IoU matrix of shape (len(polys_a), len(polys_b))"""
    prepared_a = [prepare_polygon(p) for p in polys_a]
    prepared_b = [prepare_polygon(p) for p in polys_b]
    out = np.zeros((len(prepared_a), len(prepared_b)), dtype=np.float64)
    for i, pa in enumerate(prepared_a):
        for j, pb in enumerate(prepared_b):
            out[i, j] = prepared_iou(pa, pb)
    return out


def rotation_matrix(theta: float) -> npt.NDArray[np.float64]:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def rotate_points(points, theta: float, center: Point = (0.0, 0.0)) -> Polygon:
    arr = _as_polygon(points)
    origin = np.asarray(center, dtype=np.float64)
    return (arr - origin) @ rotation_matrix(theta).T + origin


def rbox_to_quad(rb: RBox) -> Quad:
    hw, hh = rb.w / 2.0, rb.h / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]], dtype=np.float64)
    return rotate_points(local, rb.theta) + np.array([rb.x, rb.y])


def min_area_rect(points) -> RBox:
    """Minimum-area enclosing rectangle by rotating calipers over the hull edges"""
    hull = convex_hull(points)
    edges = np.roll(hull, -1, axis=0) - hull
    best = None
    for dx, dy in edges:
        length = math.hypot(dx, dy)
        if length == 0.0:
            continue
        u = np.array([dx, dy]) / length
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        extent_u = float(pu.max() - pu.min())
        extent_v = float(pv.max() - pv.min())
        rect_area = extent_u * extent_v
        if best is None or rect_area < best[0] * (1.0 - 1e-12):
            mid_u = float(pu.max() + pu.min()) / 2.0
            mid_v = float(pv.max() + pv.min()) / 2.0
            center = u * mid_u + v * mid_v
            best = (rect_area, center, extent_u, extent_v, math.atan2(dy, dx))
    _, center, w, h, theta = best
    return RBox(float(center[0]), float(center[1]), w, h, theta)
