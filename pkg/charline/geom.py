"""Geometric primitives and small numeric kernels shared by every stage.

Coordinates are image pixels with ``y`` pointing down.  A pixel ``(col, row)``
covers ``[col, col + 1) x [row, row + 1)``.
"""
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
from shapely import geometry as shapes


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Point coordinates must be finite, got ({self.x}, {self.y}).")

    def as_tuple(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class AABox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        values = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"AABox coordinates must be finite, got {values}.")
        if self.xmax < self.xmin or self.ymax < self.ymin:
            raise ValueError(f"AABox requires xmax >= xmin and ymax >= ymin, got {values}.")

    @classmethod
    def from_points(cls, points):
        arr = _as_xy(points)
        if arr.shape[0] == 0:
            raise ValueError("Cannot bound an empty point set.")
        return cls(float(arr[:, 0].min()), float(arr[:, 1].min()),
                   float(arr[:, 0].max()), float(arr[:, 1].max()))

    @classmethod
    def union(cls, boxes: Iterable["AABox"]):
        boxes = list(boxes)
        if not boxes:
            raise ValueError("Cannot take the union of zero boxes.")
        return cls(min(b.xmin for b in boxes), min(b.ymin for b in boxes),
                   max(b.xmax for b in boxes), max(b.ymax for b in boxes))

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return Point(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)

    def corners(self):
        """Corners clockwise from top-left, shape (4, 2)."""
        return np.array([
            [self.xmin, self.ymin],
            [self.xmax, self.ymin],
            [self.xmax, self.ymax],
            [self.xmin, self.ymax],
        ], dtype=float)

    def contains(self, point: Point):
        return self.xmin <= point.x <= self.xmax and self.ymin <= point.y <= self.ymax

    def as_list(self):
        return [self.xmin, self.ymin, self.xmax, self.ymax]


@dataclass(frozen=True)
class Quad:
    """Four points, clockwise in image coordinates, starting top-left.

    Use :meth:`from_points` to build one from points in any order or
    winding; the constructor itself only checks.
    """
    points: Tuple[Point, Point, Point, Point]

    def __post_init__(self):
        if len(self.points) != 4:
            raise ValueError(f"Quad needs exactly 4 points, got {len(self.points)}.")
        arr = self.as_array()
        if signed_area(arr) <= 0:
            raise ValueError("Quad must be non-degenerate with clockwise winding; use Quad.from_points.")
        if not is_simple_polygon(arr):
            raise ValueError("Quad must not self-intersect.")

    @classmethod
    def from_points(cls, points):
        arr = _as_xy(points)
        if arr.shape != (4, 2):
            raise ValueError(f"Quad needs exactly 4 points, got shape {arr.shape}.")
        if signed_area(arr) < 0:
            arr = arr[::-1]
        start = int(np.argmin(arr[:, 0] + arr[:, 1]))
        arr = np.roll(arr, -start, axis=0)
        return cls(tuple(Point(float(x), float(y)) for x, y in arr))

    @classmethod
    def from_box(cls, box: AABox):
        return cls.from_points(box.corners())

    def as_array(self):
        return np.array([p.as_tuple() for p in self.points], dtype=float)

    @property
    def area(self):
        return abs(signed_area(self.as_array()))

    @property
    def aabox(self):
        return AABox.from_points(self.as_array())

    @property
    def center(self):
        arr = self.as_array()
        return Point(float(arr[:, 0].mean()), float(arr[:, 1].mean()))

    def contains(self, point: Point):
        return point_in_polygon(point, self.as_array())

    def is_axis_aligned(self, tol=1e-9):
        arr = self.as_array()
        box = self.aabox
        return np.allclose(arr, box.corners(), atol=tol)


@dataclass(frozen=True)
class EigenPair:
    lambda1: float
    lambda2: float


def _as_xy(points):
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
        return arr.reshape(-1, 2) if arr.size else np.zeros((0, 2))
    pts = list(points)
    if not pts:
        return np.zeros((0, 2))
    if isinstance(pts[0], Point):
        return np.array([p.as_tuple() for p in pts], dtype=float)
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def iou(a: AABox, b: AABox):
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def covariance_eigens(points) -> EigenPair:
    """Eigenvalues of the 1/n sample covariance of 2-D points, largest first."""
    arr = _as_xy(points)
    n = arr.shape[0]
    if n == 0:
        return EigenPair(0.0, 0.0)
    centered = arr - arr.mean(axis=0)
    sxx = float(np.dot(centered[:, 0], centered[:, 0])) / n
    syy = float(np.dot(centered[:, 1], centered[:, 1])) / n
    sxy = float(np.dot(centered[:, 0], centered[:, 1])) / n
    half_trace = 0.5 * (sxx + syy)
    radius = math.hypot(0.5 * (sxx - syy), sxy)
    lambda1 = half_trace + radius
    # ac - b^2 over lambda1 avoids cancellation in half_trace - radius
    det = sxx * syy - sxy * sxy
    lambda2 = det / lambda1 if lambda1 > 0 else 0.0
    return EigenPair(max(lambda1, 0.0), max(lambda2, 0.0))


def nms(candidates, iou_threshold):
    """Greedy score-descending suppression.

    Works on anything with ``box`` and ``score`` attributes; ties in score go
    to the lower input index.  Survivors come back sorted by score.
    """
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, i))
    kept = []
    for i in order:
        box = candidates[i].box
        if all(iou(box, candidates[j].box) < iou_threshold for j in kept):
            kept.append(i)
    return [candidates[i] for i in kept]


def signed_area(polygon):
    """Shoelace area; positive for clockwise winding in image coordinates."""
    arr = _as_xy(polygon)
    if arr.shape[0] < 3:
        return 0.0
    x, y = arr[:, 0], arr[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(polygon):
    return abs(signed_area(polygon))


def point_line_distance(points, line):
    """Distance from points to the line a*x + b*y + c = 0 with a^2 + b^2 = 1."""
    a, b, c = line
    arr = _as_xy(points)
    return np.abs(arr[:, 0] * a + arr[:, 1] * b + c)


def point_in_polygon(point, polygon):
    """Points on the boundary count as inside."""
    if isinstance(point, Point):
        point = point.as_tuple()
    arr = _as_xy(polygon)
    if arr.shape[0] < 3:
        return False
    return bool(shapes.Polygon(arr).covers(shapes.Point(float(point[0]), float(point[1]))))


def is_simple_polygon(polygon):
    """True when no two non-adjacent edges of the closed polygon touch."""
    arr = _as_xy(polygon)
    if arr.shape[0] < 3:
        return False
    return bool(shapes.LinearRing(arr).is_simple)


def centers_of(boxes: Sequence[AABox]):
    return np.array([[b.center.x, b.center.y] for b in boxes], dtype=float).reshape(-1, 2)


def corners_of(boxes: Sequence[AABox]):
    if not boxes:
        return np.zeros((0, 2))
    return np.concatenate([b.corners() for b in boxes], axis=0)


def rotate_points(points, angle_rad, origin=(0.0, 0.0)) -> np.ndarray:
    arr = _as_xy(points) - np.asarray(origin, dtype=float)
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    rot = np.array([[c, -s], [s, c]])
    return arr @ rot.T + np.asarray(origin, dtype=float)
