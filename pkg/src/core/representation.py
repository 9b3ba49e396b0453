"""
Representation Module

Gliding-vertex encoding of oriented quadrangles.

An object is described by its horizontal box (x, y, w, h), four length
ratios alpha_1..alpha_4 locating the object's extreme vertices on the top,
right, bottom and left sides of the box, and the obliquity factor r (object
area over box area). Vertices glide clockwise along the box perimeter from
the corners TL, TR, BR, BL, so alpha = 0 and alpha = 1 both reproduce the
horizontal box.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import numpy.typing as npt

from src.core.geometry import HBox, Quad, area, make_quad
from src.errors import DegenerateGeometryError, InvalidInputError

DEFAULT_T_R = 0.8

# obliquity() tolerates this much of the object outside the box
ENCLOSURE_SLACK = 1e-6

# r this close to 1 means the object fills its box
FILL_TOLERANCE = 1e-12


@dataclass(frozen=True)
class GlidingRep:
    """(x, y, w, h, alpha_1..alpha_4, r); alpha and r are clamped to [0, 1] on construction"""

    hbox: HBox
    alpha: Tuple[float, float, float, float]
    r: float

    def __post_init__(self):
        if len(self.alpha) != 4:
            raise InvalidInputError(f"alpha needs 4 values, got {len(self.alpha)}")
        values = tuple(float(a) for a in self.alpha) + (float(self.r),)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"alpha and r must be finite, got {values}")
        object.__setattr__(self, "alpha", tuple(min(max(a, 0.0), 1.0) for a in values[:4]))
        object.__setattr__(self, "r", min(max(values[4], 0.0), 1.0))

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.concatenate([self.hbox.as_array(), np.asarray(self.alpha), [self.r]])

    @classmethod
    def from_array(cls, values) -> "GlidingRep":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size != 9:
            raise InvalidInputError(f"a gliding representation has 9 values, got {v.size}")
        return cls(HBox(*map(float, v[:4])), tuple(map(float, v[4:8])), float(v[8]))


@dataclass(frozen=True)
class SelectionPolicy:
    """Obliquity threshold: r > t_r selects the horizontal box"""

    t_r: float = DEFAULT_T_R

    def __post_init__(self):
        if not (0.0 <= self.t_r <= 1.0):
            raise InvalidInputError(f"t_r must lie in [0, 1], got {self.t_r}")


def _as_quads(quads) -> npt.NDArray[np.float64]:
    arr = np.asarray(quads, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr.reshape(-1, 4, 2)
    if arr.ndim != 3 or arr.shape[1:] != (4, 2):
        raise InvalidInputError(f"expected quads of shape (N, 4, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("quad coordinates must be finite")
    return arr


def _pick(values: npt.NDArray[np.float64], candidates: npt.NDArray[np.bool_]) -> npt.NDArray[np.intp]:
    # index of the largest value among the candidate vertices
    return np.argmax(np.where(candidates, values, -np.inf), axis=1)


def extreme_vertices(quads) -> npt.NDArray[np.float64]:
    """Top, right, bottom and left vertices of each quad, shape (N, 4, 2).

    Ties on the extreme coordinate go to the vertex furthest along the
    gliding direction (+x on top, +y on the right, -x at the bottom, -y on
    the left), so axis-aligned rectangles encode to alpha = 1.
    """
    arr = _as_quads(quads)
    x, y = arr[..., 0], arr[..., 1]
    top = _pick(x, y == y.min(axis=1, keepdims=True))
    right = _pick(y, x == x.max(axis=1, keepdims=True))
    bottom = _pick(-x, y == y.max(axis=1, keepdims=True))
    left = _pick(-y, x == x.min(axis=1, keepdims=True))
    order = np.stack([top, right, bottom, left], axis=1)
    return np.take_along_axis(arr, order[..., None], axis=1)


def encode_batch(quads):
    """Vectorized encode.

    Returns ``(hboxes, alpha, r)`` with shapes (N, 4), (N, 4) and (N,);
    hboxes hold center and size.
    """
    arr = _as_quads(quads)
    xmin, ymin = arr[..., 0].min(axis=1), arr[..., 1].min(axis=1)
    xmax, ymax = arr[..., 0].max(axis=1), arr[..., 1].max(axis=1)
    w, h = xmax - xmin, ymax - ymin
    if np.any(w <= 0) or np.any(h <= 0):
        raise DegenerateGeometryError("quad has a zero-extent horizontal box")

    v = extreme_vertices(arr)
    alpha = np.stack(
        [
            (v[:, 0, 0] - xmin) / w,
            (v[:, 1, 1] - ymin) / h,
            (xmax - v[:, 2, 0]) / w,
            (ymax - v[:, 3, 1]) / h,
        ],
        axis=1,
    )
    # shoelace relative to the box corner keeps rounding at the scale of the box
    x, y = arr[..., 0] - xmin[:, None], arr[..., 1] - ymin[:, None]
    shoelace = np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    r = np.abs(shoelace) / 2.0 / (w * h)
    r = np.where(np.abs(r - 1.0) <= FILL_TOLERANCE, 1.0, r)
    hboxes = np.stack([(xmin + xmax) / 2.0, (ymin + ymax) / 2.0, w, h], axis=1)
    return hboxes, np.clip(alpha, 0.0, 1.0), np.clip(r, 0.0, 1.0)


def decode_batch(hboxes, alpha) -> npt.NDArray[np.float64]:
    """Vectorized decode of (N, 4) boxes and (N, 4) ratios into (N, 4, 2) quads"""
    boxes = np.asarray(hboxes, dtype=np.float64).reshape(-1, 4)
    a = np.clip(np.asarray(alpha, dtype=np.float64).reshape(-1, 4), 0.0, 1.0)
    x, y, w, h = boxes.T
    x0, x1 = x - w / 2.0, x + w / 2.0
    y0, y1 = y - h / 2.0, y + h / 2.0
    v1 = np.stack([x0 + a[:, 0] * w, y0], axis=1)
    v2 = np.stack([x1, y0 + a[:, 1] * h], axis=1)
    v3 = np.stack([x1 - a[:, 2] * w, y1], axis=1)
    v4 = np.stack([x0, y1 - a[:, 3] * h], axis=1)
    return np.stack([v1, v2, v3, v4], axis=1)


def encode(obj: Quad) -> GlidingRep:
    quad = make_quad(obj)
    hboxes, alpha, r = encode_batch(quad[None])
    return GlidingRep(HBox(*map(float, hboxes[0])), tuple(map(float, alpha[0])), float(r[0]))


def decode(rep: GlidingRep) -> Quad:
    return decode_batch(rep.hbox.as_array()[None], np.asarray(rep.alpha)[None])[0]


def select(rep: GlidingRep, policy: SelectionPolicy) -> Quad:
    """Horizontal box for nearly horizontal objects (r > t_r), decoded quad otherwise"""
    if rep.r > policy.t_r:
        return rep.hbox.to_quad()
    return decode(rep)


def obliquity(obj: Quad, box: HBox) -> float:
    quad = np.asarray(obj, dtype=np.float64).reshape(-1, 2)
    slack = ENCLOSURE_SLACK * max(box.w, box.h, 1.0)
    xs, ys = quad[:, 0], quad[:, 1]
    if (
        xs.min() < box.xmin - slack
        or xs.max() > box.xmax + slack
        or ys.min() < box.ymin - slack
        or ys.max() > box.ymax + slack
    ):
        raise InvalidInputError("box does not enclose the object")
    return min(area(quad) / box.area, 1.0)
