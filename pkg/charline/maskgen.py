"""Character masks from word annotations.

For every annotated word the candidates inside it are linked into a k-NN
graph, reduced to a maximum spanning tree, and cut greedily, one tree edge
at a time, while the selection score keeps rising.  The surviving group is
the word's character mask; its score doubles as the loss weight.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import cdist
from shapely.geometry import MultiPoint

from charline.constants import (
    DEFAULT_COUNT_TERM_WEIGHT,
    DEFAULT_KNN_K,
    DEFAULT_MASK_SCORE_FLOOR,
    DEFAULT_MASK_WEIGHT,
    DEGENERATE_EIGEN,
    EXHAUSTIVE_MAX_CANDIDATES,
)
from charline.errors import EmptySelectionError
from charline.geom import AABox, Quad, centers_of, corners_of, covariance_eigens, polygon_area, signed_area
from charline.ingest import CharCandidate, Scene, WordAnnotation, validate_doc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskScoreParams:
    w: float = field(default=DEFAULT_MASK_WEIGHT)
    count_term_weight: float = field(default=DEFAULT_COUNT_TERM_WEIGHT)
    knn_k: int = field(default=DEFAULT_KNN_K)
    score_floor: float = field(default=DEFAULT_MASK_SCORE_FLOOR)

    def __post_init__(self):
        if not (0.0 <= self.w <= 1.0):
            raise ValueError(f"w must lie in [0, 1], got {self.w}.")
        if self.knn_k < 1:
            raise ValueError(f"knn_k must be positive, got {self.knn_k}.")
        if self.count_term_weight < 0:
            raise ValueError(f"count_term_weight must be >= 0, got {self.count_term_weight}.")


class MaskScore(NamedTuple):
    s: float
    s1: float
    s2: float


@dataclass(frozen=True)
class CharGraph:
    nodes: Tuple[int, ...]
    edges: Dict[Tuple[int, int], float]
    mean_knn_distance: float


@dataclass(frozen=True)
class CharMask:
    word_index: int
    selected_ids: Tuple[int, ...]
    s: float
    s1: float
    s2: float

    @property
    def is_empty(self):
        return not self.selected_ids


# Coverage helpers for quadrangle annotations

def min_area_rect(points):
    """Minimum-area enclosing rectangle as a (4, 2) array, clockwise."""
    arr = np.asarray(points, dtype=float).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValueError("Cannot enclose an empty point set.")
    rect = MultiPoint(arr).minimum_rotated_rectangle
    if rect.geom_type != "Polygon":
        # collinear or coincident points
        return AABox.from_points(arr).corners()
    corners = np.asarray(rect.exterior.coords, dtype=float)[:4]
    if signed_area(corners) < 0:
        corners = corners[::-1]
    return corners


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: part of ``subject`` inside the convex ``clip``.

    Both polygons are given clockwise in image coordinates (positive
    shoelace area).
    """
    output = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clip, dtype=float)
    n = clip.shape[0]
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0

        def intersection(p, q):
            d = (q[0] - p[0], q[1] - p[1])
            denom = edge[0] * d[1] - edge[1] * d[0]
            if denom == 0:
                return q
            t = -(edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])) / denom
            return (p[0] + t * d[0], p[1] + t * d[1])

        current, output = output, []
        if not current:
            break
        prev = current[-1]
        for p in current:
            if inside(p):
                if not inside(prev):
                    output.append(intersection(prev, p))
                output.append(p)
            elif inside(prev):
                output.append(intersection(prev, p))
            prev = p
    return np.array(output, dtype=float).reshape(-1, 2)


def quad_coverage(boxes: Sequence[AABox], quad: Quad):
    rect = min_area_rect(corners_of(boxes))
    inter = clip_polygon(quad.as_array(), rect)
    return polygon_area(inter) / quad.area


def mask_score(selection: Sequence[CharCandidate], anno: WordAnnotation,
               params: MaskScoreParams = MaskScoreParams()) -> MaskScore:
    if not selection:
        raise EmptySelectionError("mask_score needs at least one selected candidate.")
    boxes = [c.box for c in selection]
    # an axis-aligned quad is scored exactly like its box
    if anno.is_quad and not anno.region.is_axis_aligned():
        s1 = quad_coverage(boxes, anno.region)
    else:
        s1 = AABox.union(boxes).area / anno.aabox.area
    s1 = min(max(s1, 0.0), 1.0)

    eig = covariance_eigens(centers_of(boxes))
    if len(selection) <= 2 or eig.lambda1 < DEGENERATE_EIGEN:
        s2 = 1.0
    else:
        s2 = min(max(1.0 - eig.lambda2 / eig.lambda1, 0.0), 1.0)

    s = params.w * s1 + (1.0 - params.w) * s2
    if anno.char_count is not None:
        s -= params.count_term_weight * abs(len(selection) - anno.char_count) / anno.char_count
    return MaskScore(s, s1, s2)


def build_char_graph(cands: Sequence[CharCandidate], k: int = DEFAULT_KNN_K) -> CharGraph:
    ids = tuple(c.id for c in cands)
    if len(cands) < 2:
        return CharGraph(nodes=ids, edges={}, mean_knn_distance=0.0)
    centers = centers_of([c.box for c in cands])
    dist = cdist(centers, centers)
    np.fill_diagonal(dist, np.inf)
    kk = min(k, len(cands) - 1)
    pairs = set()
    for i in range(len(cands)):
        # stable sort keeps the lower index first among equal distances
        for j in np.argsort(dist[i], kind="stable")[:kk]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    pairs = sorted(pairs)
    mean_d = float(np.mean([dist[i, j] for i, j in pairs]))
    edges = {}
    for i, j in pairs:
        ratio = dist[i, j] / mean_d if mean_d > 0 else 0.0
        weight = math.exp(-ratio) * (cands[i].score + cands[j].score)
        u, v = sorted((ids[i], ids[j]))
        edges[(u, v)] = weight
    return CharGraph(nodes=ids, edges=edges, mean_knn_distance=mean_d)


def maximum_spanning_tree(g: CharGraph) -> List[Tuple[int, int, float]]:
    """Kruskal on descending weight; a forest when the graph is disconnected."""
    parent = {n: n for n in g.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for (u, v), w in sorted(g.edges.items(), key=lambda item: (-item[1], item[0])):
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
            tree.append((u, v, w))
    return tree


def _empty_mask(word_index):
    return CharMask(word_index=word_index, selected_ids=(), s=0.0, s1=0.0, s2=0.0)


def greedy_partition(tree, cands: Sequence[CharCandidate], anno: WordAnnotation,
                     params: MaskScoreParams = MaskScoreParams(), word_index=0) -> CharMask:
    if not cands:
        return _empty_mask(word_index)
    by_id = {c.id: c for c in cands}
    cache = {}

    def score(group):
        key = frozenset(group)
        if key not in cache:
            cache[key] = mask_score([by_id[i] for i in sorted(group)], anno, params)
        return cache[key]

    current = set(by_id)
    current_score = score(current)
    graph = nx.Graph()
    graph.add_nodes_from(current)
    graph.add_edges_from((u, v) for u, v, _ in tree if u in by_id and v in by_id)

    while len(current) > 1:
        sub = graph.subgraph(current).copy()
        best = None
        for u, v in sorted(tuple(sorted(e)) for e in sub.edges):
            sub.remove_edge(u, v)
            side = nx.node_connected_component(sub, u)
            sub.add_edge(u, v)
            other = current - side
            groups = sorted(
                (side, other),
                key=lambda grp: (-score(grp).s, -len(grp), min(grp)),
            )
            chosen = groups[0]
            if best is None or score(chosen).s > score(best).s:
                best = chosen
        if best is None or score(best).s <= current_score.s:
            break
        logger.debug(f"word {word_index}: cut to {len(best)} of {len(current)} candidates, "
                     f"score {current_score.s:.4f} -> {score(best).s:.4f}")
        current = set(best)
        current_score = score(current)

    return CharMask(word_index=word_index, selected_ids=tuple(sorted(current)),
                    s=current_score.s, s1=current_score.s1, s2=current_score.s2)


def exhaustive_mask(cands: Sequence[CharCandidate], anno: WordAnnotation,
                    params: MaskScoreParams = MaskScoreParams(), word_index=0) -> CharMask:
    """Best subset by full enumeration; only sensible for small words."""
    if not cands:
        return _empty_mask(word_index)
    if len(cands) > EXHAUSTIVE_MAX_CANDIDATES:
        raise ValueError(f"Exhaustive search is limited to {EXHAUSTIVE_MAX_CANDIDATES} candidates, "
                         f"got {len(cands)}.")
    best = None
    ordered = sorted(cands, key=lambda c: c.id)
    for size in range(len(ordered), 0, -1):
        for subset in itertools.combinations(ordered, size):
            result = mask_score(subset, anno, params)
            if best is None or result.s > best[0].s:
                best = (result, subset)
    result, subset = best
    return CharMask(word_index=word_index, selected_ids=tuple(c.id for c in subset),
                    s=result.s, s1=result.s1, s2=result.s2)


def loss_weight(mask: CharMask):
    if mask.is_empty:
        return 0.0
    return mask.s


def word_candidates(scene: Scene, anno: WordAnnotation, score_floor):
    return [c for c in scene.candidates if c.score >= score_floor and anno.contains(c.center)]


def generate_masks(scene: Scene, params: MaskScoreParams = MaskScoreParams()) -> List[CharMask]:
    masks = []
    for index, anno in enumerate(scene.words):
        cands = word_candidates(scene, anno, params.score_floor)
        if not cands:
            masks.append(_empty_mask(index))
            continue
        graph = build_char_graph(cands, params.knn_k)
        tree = maximum_spanning_tree(graph)
        masks.append(greedy_partition(tree, cands, anno, params, word_index=index))
    return masks


def masks_to_doc(masks: Sequence[CharMask]):
    return [
        {"word_index": m.word_index, "selected_ids": list(m.selected_ids), "s": m.s, "s1": m.s1, "s2": m.s2}
        for m in masks
    ]


class MaskDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    word_index: int
    selected_ids: List[int]
    s: float
    s1: float
    s2: float


def masks_from_doc(doc) -> List[CharMask]:
    return [
        CharMask(word_index=item.word_index, selected_ids=tuple(item.selected_ids), s=item.s, s1=item.s1, s2=item.s2)
        for item in validate_doc(List[MaskDoc], doc, "mask")
    ]
