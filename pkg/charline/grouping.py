"""Character grouping by greedy min-cost flow over character pairs.

Nodes of the flow graph are pairs of nearby characters, so the angle between
two consecutive pairs (a three-character relation) becomes an ordinary edge
cost.  Pairs are oriented along a dominant pair direction, which
makes the graph a DAG; each extraction is then an exact shortest path.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import cdist

from charline.constants import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_ENTRY_EXIT_COST,
    DEFAULT_GROUP_SCORE_FLOOR,
    DEFAULT_KNN_K,
)
from charline.errors import NonAdjacentPairsError
from charline.geom import Point, centers_of
from charline.ingest import CharCandidate, validate_doc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupingParams:
    alpha: float = field(default=DEFAULT_ALPHA)
    beta: float = field(default=DEFAULT_BETA)
    entry_exit_cost: float = field(default=DEFAULT_ENTRY_EXIT_COST)
    score_floor: float = field(default=DEFAULT_GROUP_SCORE_FLOOR)
    k: int = field(default=DEFAULT_KNN_K)
    # raw cos(theta) as pairwise cost instead of 1 - cos(theta)
    literal_cosine: bool = field(default=False)

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}.")
        if self.entry_exit_cost < 0:
            raise ValueError(f"entry_exit_cost must be >= 0, got {self.entry_exit_cost}.")
        if self.score_floor <= 0:
            raise ValueError(f"score_floor must be positive, got {self.score_floor}.")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}.")


@dataclass(frozen=True)
class PairNode:
    left_char_id: int
    right_char_id: int
    unary_cost: float
    midpoint: Point
    direction: Tuple[float, float]

    @property
    def char_ids(self):
        return (self.left_char_id, self.right_char_id)


@dataclass(frozen=True)
class LineGroup:
    char_ids: Tuple[int, ...]
    pair_nodes: Tuple[PairNode, ...]
    total_cost: float


def _dominant_direction(vectors):
    """Principal axis of the direction vectors, sign fixed so the axis points right (or down)."""
    if len(vectors) == 0:
        return np.array([1.0, 0.0])
    arr = np.asarray(vectors, dtype=float)
    scatter = arr.T @ arr / len(arr)
    _, vecs = np.linalg.eigh(scatter)
    axis = vecs[:, -1]
    if axis[0] < -1e-12 or (abs(axis[0]) <= 1e-12 and axis[1] < 0):
        axis = -axis
    return axis


def _knn_pairs(chars: Sequence[CharCandidate], k):
    centers = centers_of([c.box for c in chars])
    diags = np.array([c.box.diagonal for c in chars])
    metric = cdist(centers, centers) + np.abs(diags[:, None] - diags[None, :])
    np.fill_diagonal(metric, np.inf)
    kk = min(k, len(chars) - 1)
    pairs = set()
    for i in range(len(chars)):
        for j in np.argsort(metric[i], kind="stable")[:kk]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    return sorted(pairs)


def build_pair_nodes(chars: Sequence[CharCandidate], params: GroupingParams = GroupingParams()) -> List[PairNode]:
    if len(chars) < 2:
        return []
    pairs = _knn_pairs(chars, params.k)
    centers = centers_of([c.box for c in chars])
    raw = [centers[j] - centers[i] for i, j in pairs]
    units = [v / np.linalg.norm(v) if np.linalg.norm(v) > 0 else np.array([1.0, 0.0]) for v in raw]
    axis = _dominant_direction(units)
    rank = _char_rank(chars, centers, axis)

    nodes = []
    for i, j in pairs:
        left, right = (i, j) if rank[i] < rank[j] else (j, i)
        delta = centers[right] - centers[left]
        dist = float(np.linalg.norm(delta))
        direction = delta / dist if dist > 0 else axis
        mean_diag = 0.5 * (chars[left].box.diagonal + chars[right].box.diagonal)
        norm_dist = dist / mean_diag if mean_diag > 0 else 0.0
        unary = -params.alpha * (0.5 * (chars[left].score + chars[right].score)) + params.beta * norm_dist
        mid = 0.5 * (centers[left] + centers[right])
        nodes.append(PairNode(
            left_char_id=chars[left].id,
            right_char_id=chars[right].id,
            unary_cost=float(unary),
            midpoint=Point(float(mid[0]), float(mid[1])),
            direction=(float(direction[0]), float(direction[1])),
        ))
    return nodes


def _char_rank(chars, centers, axis):
    """Total order of characters by projection on ``axis``, ties by id."""
    proj = centers @ axis
    order = sorted(range(len(chars)), key=lambda i: (proj[i], chars[i].id))
    rank = [0] * len(chars)
    for r, i in enumerate(order):
        rank[i] = r
    return rank


def pairwise_cost(m: PairNode, n: PairNode, literal_cosine=False):
    shared = set(m.char_ids) & set(n.char_ids)
    if len(shared) != 1:
        raise NonAdjacentPairsError(
            f"Pairs {m.char_ids} and {n.char_ids} share {len(shared)} characters; exactly one is required.")
    cos = m.direction[0] * n.direction[0] + m.direction[1] * n.direction[1]
    cos = min(max(cos, -1.0), 1.0)
    return cos if literal_cosine else 1.0 - cos


def _orient(nodes, rank):
    """Re-orient pair nodes so each points from the lower to the higher rank."""
    out = []
    for node in nodes:
        if rank[node.left_char_id] < rank[node.right_char_id]:
            out.append(node)
        else:
            out.append(replace(node, left_char_id=node.right_char_id, right_char_id=node.left_char_id,
                               direction=(-node.direction[0], -node.direction[1])))
    return sorted(out, key=lambda n: (rank[n.left_char_id], rank[n.right_char_id]))


def _shortest_path(nodes, params):
    """Minimum entry + nodes + edges + exit path through the DAG.

    ``nodes`` are in topological order.  Ties go to the path whose smallest
    character id is lowest.
    """
    by_left: Dict[int, List[int]] = {}
    for idx, node in enumerate(nodes):
        by_left.setdefault(node.left_char_id, []).append(idx)

    best = {}
    for idx, node in enumerate(nodes):
        start = (params.entry_exit_cost + node.unary_cost, min(node.char_ids), None)
        entry = best.get(idx)
        if entry is None or start[:2] < entry[:2]:
            best[idx] = start
        cost, low, _ = best[idx]
        for nxt in by_left.get(node.right_char_id, []):
            cand_cost = cost + pairwise_cost(node, nodes[nxt], params.literal_cosine) + nodes[nxt].unary_cost
            cand = (cand_cost, min(low, min(nodes[nxt].char_ids)), idx)
            current = best.get(nxt)
            if current is None or cand[:2] < current[:2]:
                best[nxt] = cand

    end = None
    for idx, (cost, low, _) in best.items():
        total = cost + params.entry_exit_cost
        if end is None or (total, low, idx) < end:
            end = (total, low, idx)
    if end is None:
        return [], math.inf, None
    path = []
    idx = end[2]
    while idx is not None:
        path.append(nodes[idx])
        idx = best[idx][2]
    return path[::-1], end[0], end[1]


def extract_groups(chars: Sequence[CharCandidate], params: GroupingParams = GroupingParams()) -> List[LineGroup]:
    """Extract negative-cost paths one at a time until none is left.

    Every round orders the remaining pairs along the dominant direction and
    along its perpendicular, and keeps the cheaper of the two shortest paths,
    so lines at any angle to the dominant direction chain correctly.
    """
    chars = [c for c in chars if c.score >= params.score_floor]
    alive = build_pair_nodes(chars, params)
    if not alive:
        return []
    ids = [c.id for c in chars]
    centers = centers_of([c.box for c in chars])

    groups = []
    while alive:
        axis = _dominant_direction([n.direction for n in alive])
        best = None
        for ax in (axis, np.array([-axis[1], axis[0]])):
            rank_list = _char_rank(chars, centers, ax)
            rank = {ids[i]: rank_list[i] for i in range(len(chars))}
            path, cost, low = _shortest_path(_orient(alive, rank), params)
            if path and (best is None or (cost, low) < (best[1], best[2])):
                best = (path, cost, low)
        if best is None or best[1] >= 0:
            break
        path, cost, _ = best
        char_ids = (path[0].left_char_id,) + tuple(n.right_char_id for n in path)
        groups.append(LineGroup(char_ids=char_ids, pair_nodes=tuple(path), total_cost=float(cost)))
        used = set(char_ids)
        alive = [n for n in alive if not (set(n.char_ids) & used)]
    logger.debug(f"Extracted {len(groups)} groups from {len(chars)} characters.")
    return groups


def ungrouped_ids(chars: Sequence[CharCandidate], groups: Sequence[LineGroup],
                  params: GroupingParams = GroupingParams()):
    grouped = {i for g in groups for i in g.char_ids}
    return [c.id for c in chars if c.score >= params.score_floor and c.id not in grouped]


def groups_to_doc(groups: Sequence[LineGroup]):
    return [
        {"group_id": gid, "char_ids": list(g.char_ids), "total_cost": g.total_cost}
        for gid, g in enumerate(groups)
    ]


class GroupDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    group_id: int
    char_ids: List[int] = Field(min_length=2)
    total_cost: float


def groups_from_doc(doc):
    """Char chains from a group document, as ``[(group_id, char_ids), ...]``."""
    return [(item.group_id, tuple(item.char_ids)) for item in validate_doc(List[GroupDoc], doc, "group")]
