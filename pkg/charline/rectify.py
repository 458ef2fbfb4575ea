"""Thin-plate-spline rectification of text polygons and gap-profile word partition."""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates
from scipy.spatial.distance import cdist

from charline.constants import DENSITY_THRESHOLD, MIN_GAP_FRAC, STRIP_HEIGHT
from charline.errors import DegeneratePolygonError, SingularSystemError
from charline.geom import AABox, Point
from charline.ingest import CharCandidate
from charline.lineshape import LineModel, TextPolygon, end_offsets

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RectifyParams:
    strip_height: int = field(default=STRIP_HEIGHT)
    extend_ends: bool = field(default=True)
    density_threshold: float = field(default=DENSITY_THRESHOLD)
    min_gap_frac: float = field(default=MIN_GAP_FRAC)

    def __post_init__(self):
        if self.strip_height < 2:
            raise ValueError(f"strip_height must be >= 2, got {self.strip_height}.")
        if not (0.0 < self.density_threshold < 1.0):
            raise ValueError(f"density_threshold must lie in (0, 1), got {self.density_threshold}.")
        if self.min_gap_frac <= 0:
            raise ValueError(f"min_gap_frac must be positive, got {self.min_gap_frac}.")


@dataclass(frozen=True)
class RasterImage:
    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Raster size must be positive, got {self.width}x{self.height}.")
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(f"Pixel buffer shape {self.pixels.shape} does not match {self.height}x{self.width}.")

    @classmethod
    def from_array(cls, arr):
        arr = np.clip(np.rint(np.asarray(arr, dtype=float)), 0, 255).astype(np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    @classmethod
    def read_pgm(cls, path):
        with Image.open(path) as img:
            if img.mode != "L":
                raise ValueError(f"{path}: expected an 8-bit grayscale PGM, got mode {img.mode}.")
            arr = np.array(img, dtype=np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    def write_pgm(self, path):
        Image.fromarray(self.pixels.astype(np.uint8)).save(path, format="PPM")


def _kernel(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


@dataclass(frozen=True)
class TpsTransform:
    control: np.ndarray
    affine: np.ndarray
    weights: np.ndarray

    def __call__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        k = _kernel(cdist(pts, self.control, "sqeuclidean"))
        return self.affine[0] + pts @ self.affine[1:] + k @ self.weights

    def side_conditions(self):
        """Residuals of sum(w), sum(w*x), sum(w*y); all vanish for a valid fit."""
        p = np.hstack([np.ones((len(self.control), 1)), self.control])
        return p.T @ self.weights


def tps_fit(source, target) -> TpsTransform:
    src = np.asarray([p.as_tuple() if isinstance(p, Point) else p for p in source], dtype=float).reshape(-1, 2)
    dst = np.asarray([p.as_tuple() if isinstance(p, Point) else p for p in target], dtype=float).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError(f"source and target differ in length: {len(src)} vs {len(dst)}.")
    m = src.shape[0]
    if m < 3:
        raise SingularSystemError(f"TPS needs at least 3 control points, got {m}.")
    p = np.hstack([np.ones((m, 1)), src])
    if np.linalg.matrix_rank(p) < 3:
        raise SingularSystemError("TPS control points are collinear.")
    d2 = cdist(src, src, "sqeuclidean")
    if np.any(d2[np.triu_indices(m, 1)] <= 1e-18):
        raise SingularSystemError("TPS control points contain duplicates.")
    system = np.zeros((m + 3, m + 3))
    system[:m, :m] = _kernel(d2)
    system[:m, m:] = p
    system[m:, :m] = p.T
    rhs = np.zeros((m + 3, 2))
    rhs[:m] = dst
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"TPS system is singular: {exc}") from exc
    return TpsTransform(control=src, affine=solution[m:], weights=solution[:m])


@dataclass
class RectifiedStrip:
    raster: RasterImage
    polygon: TextPolygon
    transform: TpsTransform
    source_points: np.ndarray
    strip_points: np.ndarray
    _forward: Optional[TpsTransform] = None

    @property
    def height(self):
        return self.raster.height

    @property
    def width(self):
        return self.raster.width

    def to_source(self, points):
        return self.transform(points)

    def to_strip(self, points):
        if self._forward is None:
            self._forward = tps_fit(self.source_points, self.strip_points)
        return self._forward(points)


def _control_pairs(chars, polygon, model, extend_ends):
    top = np.array([p.as_tuple() for p in polygon.top])
    bottom = np.array([p.as_tuple() for p in polygon.bottom])
    if not extend_ends or chars is None or len(chars) < 2:
        return top, bottom
    start, end = end_offsets(chars, model)
    top = np.vstack([top[:1] + start, top, top[-1:] + end])
    bottom = np.vstack([bottom[:1] + start, bottom, bottom[-1:] + end])
    return top, bottom


def rectify_strip(image: RasterImage, polygon: TextPolygon, model: LineModel,
                  chars: Optional[Sequence[CharCandidate]] = None,
                  params: RectifyParams = RectifyParams()) -> RectifiedStrip:
    """Warp the polygon's interior to a ``strip_height`` x W raster.

    ``chars`` (in chain order) are only needed for ``extend_ends``.
    """
    if len(polygon.top) < 2 or model.height <= 0:
        raise DegeneratePolygonError(
            f"Cannot rectify a polygon with {len(polygon.top)} control pairs and height {model.height}.")
    top, bottom = _control_pairs(chars, polygon, model, params.extend_ends)
    mid = 0.5 * (top + bottom)
    steps = np.linalg.norm(np.diff(mid, axis=0), axis=1)
    keep = np.concatenate([[True], steps > 1e-6])
    top, bottom, mid = top[keep], bottom[keep], mid[keep]
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(mid, axis=0), axis=1))])
    total = float(arc[-1])
    if len(mid) < 2 or total <= 0:
        raise DegeneratePolygonError("Text polygon has zero center-line length.")

    H = params.strip_height
    W = max(1, int(round(H * total / model.height)))
    xs = arc / total * W
    strip_pts = np.vstack([np.stack([xs, np.zeros_like(xs)], axis=1),
                           np.stack([xs, np.full_like(xs, float(H))], axis=1)])
    source_pts = np.vstack([top, bottom])
    transform = tps_fit(strip_pts, source_pts)

    cols, rows = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    grid = np.stack([cols.ravel(), rows.ravel()], axis=1)
    src = transform(grid)
    samples = map_coordinates(image.pixels.astype(float), [src[:, 1] - 0.5, src[:, 0] - 0.5],
                              order=1, mode="constant", cval=0.0)
    raster = RasterImage.from_array(samples.reshape(H, W))
    return RectifiedStrip(raster=raster, polygon=polygon, transform=transform,
                          source_points=source_pts, strip_points=strip_pts)


@dataclass(frozen=True)
class WordPartition:
    intervals: Tuple[Tuple[int, int], ...]
    cut_lines: Tuple[Tuple[Point, Point], ...]
    word_polygons: Tuple[Tuple[Point, ...], ...]

    @property
    def word_boxes(self):
        return [AABox.from_points([p.as_tuple() for p in poly]) for poly in self.word_polygons]


def column_density(raster: RasterImage):
    """Mean darkness per column after stretching the strip's darkness to [0, 1]."""
    dark = 255.0 - raster.pixels.astype(float)
    lo, hi = dark.min(), dark.max()
    if hi - lo <= 0:
        return np.zeros(raster.width)
    return ((dark - lo) / (hi - lo)).mean(axis=0)


def _runs(mask):
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def partition_words(strip: RectifiedStrip, min_gap_frac: float = MIN_GAP_FRAC,
                    density_threshold: float = DENSITY_THRESHOLD) -> WordPartition:
    W, H = strip.width, strip.height
    density = column_density(strip.raster)
    peak = float(density.max()) if density.size else 0.0
    separators = []
    if peak > 0:
        low = density < density_threshold * peak
        min_len = min_gap_frac * H
        for start, end in _runs(low):
            # runs touching either border are margins, not separators
            if start == 0 or end == W:
                continue
            if end - start >= min_len:
                separators.append((start, end))

    intervals = []
    cursor = 0
    for start, end in separators:
        intervals.append((cursor, start))
        cursor = end
    intervals.append((cursor, W))

    cuts = []
    for start, end in separators:
        x = 0.5 * (start + end)
        ends = strip.to_source([[x, 0.0], [x, float(H)]])
        cuts.append((Point(*map(float, ends[0])), Point(*map(float, ends[1]))))

    polygons = []
    for start, end in intervals:
        corners = strip.to_source([[start, 0.0], [end, 0.0], [end, float(H)], [start, float(H)]])
        polygons.append(tuple(Point(float(x), float(y)) for x, y in corners))
    return WordPartition(intervals=tuple(intervals), cut_lines=tuple(cuts), word_polygons=tuple(polygons))


def partition_to_doc(group_id, partition: WordPartition):
    return {
        "group_id": group_id,
        "intervals": [list(iv) for iv in partition.intervals],
        "cuts": [[list(a.as_tuple()), list(b.as_tuple())] for a, b in partition.cut_lines],
        "words": [[list(p.as_tuple()) for p in poly] for poly in partition.word_polygons],
    }
