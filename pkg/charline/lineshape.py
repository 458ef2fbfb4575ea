"""Center-line models for a character chain, model selection and the text polygon."""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from charline.constants import MODEL_PENALTIES, PIECEWISE_MAX_NEIGHBORS
from charline.geom import Point, centers_of, corners_of, is_simple_polygon, point_line_distance
from charline.ingest import CharCandidate, validate_doc

logger = logging.getLogger(__name__)

Line = Tuple[float, float, float]


class LineKind(Enum):
    ORDER0 = "order0"
    ORDER1 = "order1"
    PIECEWISE = "piecewise"


@dataclass(frozen=True)
class LineModel:
    kind: LineKind
    center_lines: Tuple[Line, ...]
    height: float
    segment_spans: Tuple[Tuple[float, float], ...] = ()

    def line_for(self, index):
        """Local center line of the ``index``-th character in chain order."""
        if self.kind is LineKind.PIECEWISE:
            return self.center_lines[index]
        return self.center_lines[0]


@dataclass(frozen=True)
class ModelSelection:
    chosen: LineModel
    heights: Dict[LineKind, float]
    penalties: Dict[LineKind, float]


@dataclass(frozen=True)
class TextPolygon:
    top: Tuple[Point, ...]
    bottom: Tuple[Point, ...]
    simple: bool

    @property
    def points(self):
        return self.top + tuple(reversed(self.bottom))

    def as_array(self):
        return np.array([p.as_tuple() for p in self.points], dtype=float)


def _canonical(a, b, c):
    norm = np.hypot(a, b)
    a, b, c = a / norm, b / norm, c / norm
    if b < 0 or (b == 0 and a < 0):
        a, b, c = -a, -b, -c
    return (float(a), float(b), float(c))


def _tls_line(points):
    """Total-least-squares line through points: normal is the minor principal axis."""
    pts = np.asarray(points, dtype=float)
    mean = pts.mean(axis=0)
    centered = pts - mean
    _, vecs = np.linalg.eigh(centered.T @ centered)
    normal = vecs[:, 0]
    return _canonical(normal[0], normal[1], -float(normal @ mean))


def _height(chars, lines):
    corners = corners_of([c.box for c in chars])
    dists = np.stack([point_line_distance(corners, line) for line in lines], axis=1)
    return float(2.0 * dists.min(axis=1).max())


def height(chars: Sequence[CharCandidate], model: LineModel):
    return _height(chars, model.center_lines)


def _spread(centers):
    return float(np.ptp(centers, axis=0).max()) if len(centers) else 0.0


def fit_order0(chars: Sequence[CharCandidate]) -> LineModel:
    centers = centers_of([c.box for c in chars])
    mean = centers.mean(axis=0)
    horizontal = (0.0, 1.0, -float(mean[1]))
    vertical = (1.0, 0.0, -float(mean[0]))
    h_h = _height(chars, [horizontal])
    h_v = _height(chars, [vertical])
    line, h = (horizontal, h_h) if h_h <= h_v else (vertical, h_v)
    return LineModel(kind=LineKind.ORDER0, center_lines=(line,), height=h)


def fit_order1(chars: Sequence[CharCandidate]) -> LineModel:
    centers = centers_of([c.box for c in chars])
    if len(chars) < 2 or _spread(centers) == 0:
        return fit_order0(chars)
    line = _tls_line(centers)
    return LineModel(kind=LineKind.ORDER1, center_lines=(line,), height=_height(chars, [line]))


def _chain_positions(centers):
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def fit_piecewise(chars: Sequence[CharCandidate]) -> LineModel:
    """One TLS segment per character over its min(n, 11) chain neighbours."""
    n = len(chars)
    centers = centers_of([c.box for c in chars])
    if n < 2 or _spread(centers) == 0:
        base = fit_order0(chars)
        return LineModel(kind=LineKind.PIECEWISE, center_lines=base.center_lines * n, height=base.height,
                         segment_spans=((0.0, 0.0),) * n)
    k = min(n, PIECEWISE_MAX_NEIGHBORS)
    lines = []
    for i in range(n):
        window = sorted(range(n), key=lambda j: (abs(j - i), j))[:k]
        pts = centers[sorted(window)]
        lines.append(_tls_line(pts) if _spread(pts) > 0 else _tls_line(centers))
    pos = _chain_positions(centers)
    spans = []
    for i in range(n):
        lo = pos[i] if i == 0 else 0.5 * (pos[i - 1] + pos[i])
        hi = pos[i] if i == n - 1 else 0.5 * (pos[i] + pos[i + 1])
        spans.append((float(lo), float(hi)))
    return LineModel(kind=LineKind.PIECEWISE, center_lines=tuple(lines), height=_height(chars, lines),
                     segment_spans=tuple(spans))


def select_model(chars: Sequence[CharCandidate], penalties=None) -> ModelSelection:
    penalties = penalties or {kind: MODEL_PENALTIES[kind.value] for kind in LineKind}
    fits = [fit_order0(chars), fit_order1(chars), fit_piecewise(chars)]
    heights = {}
    chosen = None
    for kind, model in zip(LineKind, fits):
        heights[kind] = model.height
        cost = model.height * penalties[kind]
        # strict comparison keeps the simpler model on ties
        if chosen is None or cost < chosen[0]:
            chosen = (cost, model)
    logger.debug("h_m: " + ", ".join(f"{k.value}={h:.3f}" for k, h in heights.items())
                 + f" -> {chosen[1].kind.value}")
    return ModelSelection(chosen=chosen[1], heights=heights, penalties=penalties)


def order_chain(chars: Sequence[CharCandidate]) -> List[CharCandidate]:
    """Order ungrouped characters by projection onto their order-1 axis."""
    chars = list(chars)
    centers = centers_of([c.box for c in chars])
    if len(chars) < 2 or _spread(centers) == 0:
        return sorted(chars, key=lambda c: c.id)
    a, b, _ = _tls_line(centers)
    tangent = np.array([b, -a])
    proj = centers @ tangent
    return [chars[i] for i in sorted(range(len(chars)), key=lambda i: (proj[i], chars[i].id))]


def local_frame(centers, line, index):
    """Foot of the center on ``line``, the unit tangent along the chain and its normal."""
    a, b, c = line
    center = centers[index]
    signed = a * center[0] + b * center[1] + c
    foot = center - signed * np.array([a, b])
    tangent = np.array([b, -a])
    if len(centers) > 1:
        lo, hi = max(index - 1, 0), min(index + 1, len(centers) - 1)
        chain_dir = centers[hi] - centers[lo]
        if float(tangent @ chain_dir) < 0:
            tangent = -tangent
    normal = np.array([-tangent[1], tangent[0]])
    return foot, tangent, normal


def end_offsets(chars: Sequence[CharCandidate], model: LineModel):
    """Outward shifts along the tangent that reach the outer edges of the first and last boxes."""
    centers = centers_of([c.box for c in chars])
    offsets = []
    for index, sign in ((0, -1.0), (len(chars) - 1, 1.0)):
        _, tangent, _ = local_frame(centers, model.line_for(index), index)
        box = chars[index].box
        reach = 0.5 * (abs(tangent[0]) * box.width + abs(tangent[1]) * box.height)
        offsets.append(sign * reach * tangent)
    return offsets


def text_polygon(chars: Sequence[CharCandidate], model: LineModel) -> TextPolygon:
    """One control pair per character, ``h/2`` either side of its center line.

    The first and last pairs sit on the outer edges of the end characters, not on their centers.
    """
    centers = centers_of([c.box for c in chars])
    half = 0.5 * model.height
    top, bottom = [], []
    for i in range(len(chars)):
        foot, _, normal = local_frame(centers, model.line_for(i), i)
        top.append(foot - half * normal)
        bottom.append(foot + half * normal)
    top = np.array(top, dtype=float).reshape(-1, 2)
    bottom = np.array(bottom, dtype=float).reshape(-1, 2)
    if len(chars) > 1:
        start, end = end_offsets(chars, model)
        top[0] += start
        bottom[0] += start
        top[-1] += end
        bottom[-1] += end
    simple = is_simple_polygon(np.vstack([top, bottom[::-1]]))
    if not simple:
        logger.warning(f"Text polygon over {len(chars)} characters self-intersects.")
    return TextPolygon(top=tuple(Point(float(x), float(y)) for x, y in top),
                       bottom=tuple(Point(float(x), float(y)) for x, y in bottom), simple=simple)


def lines_to_doc(entries):
    """``entries``: iterable of ``(group_id, LineModel, TextPolygon)``."""
    doc = []
    for group_id, model, polygon in entries:
        item = {
            "group_id": group_id,
            "kind": model.kind.value,
            "lines": [list(line) for line in model.center_lines],
            "h": model.height,
            "polygon": [list(p.as_tuple()) for p in polygon.points],
        }
        if model.segment_spans:
            item["spans"] = [list(span) for span in model.segment_spans]
        doc.append(item)
    return doc


class LineDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    group_id: int
    kind: LineKind
    lines: List[Tuple[float, float, float]] = Field(min_length=1)
    h: float
    polygon: List[Tuple[float, float]]
    spans: List[Tuple[float, float]] = []


def lines_from_doc(doc):
    """Inverse of :func:`lines_to_doc`, as ``[(group_id, LineModel, TextPolygon)]``."""
    entries = []
    for item in validate_doc(List[LineDoc], doc, "line"):
        model = LineModel(kind=item.kind, center_lines=tuple(item.lines), height=item.h,
                          segment_spans=tuple(tuple(span) for span in item.spans))
        pts = [Point(x, y) for x, y in item.polygon]
        n = len(pts) // 2
        top = tuple(pts[:n])
        bottom = tuple(reversed(pts[n:]))
        simple = is_simple_polygon([p.as_tuple() for p in pts]) if n >= 2 else False
        entries.append((item.group_id, model, TextPolygon(top=top, bottom=bottom, simple=simple)))
    return entries
