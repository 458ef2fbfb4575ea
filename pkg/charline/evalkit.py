"""Detection evaluation: greedy IoU matching and precision / recall / F-measure.

Matching follows the VOC convention: predictions are visited in descending
score order (lower index first on ties) and each claims the unclaimed ground
truth of highest IoU at or above the threshold.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict

from charline.constants import DEFAULT_GROUP_SCORE_FLOOR, EVAL_IOU_THRESHOLD, NMS_IOU_THRESHOLD
from charline.geom import AABox, iou, nms
from charline.ingest import Scene, parse_box, validate_doc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchResult:
    pairs: Tuple[Tuple[int, int], ...]
    unmatched_preds: Tuple[int, ...]
    unmatched_gts: Tuple[int, ...]

    @property
    def n_preds(self):
        return len(self.pairs) + len(self.unmatched_preds)

    @property
    def n_gts(self):
        return len(self.pairs) + len(self.unmatched_gts)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f_measure: float


def match(preds: Sequence[Tuple[AABox, float]], gts: Sequence[AABox],
          iou_threshold: float = EVAL_IOU_THRESHOLD) -> MatchResult:
    """``preds`` are ``(box, score)`` pairs; ids in the result are list positions."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}.")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    claimed = set()
    pairs = []
    for i in order:
        box = preds[i][0]
        best = None
        for j, gt in enumerate(gts):
            if j in claimed:
                continue
            overlap = iou(box, gt)
            if overlap >= iou_threshold and (best is None or overlap > best[0]):
                best = (overlap, j)
        if best is not None:
            claimed.add(best[1])
            pairs.append((i, best[1]))
    matched_preds = {i for i, _ in pairs}
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_preds=tuple(i for i in range(len(preds)) if i not in matched_preds),
        unmatched_gts=tuple(j for j in range(len(gts)) if j not in claimed),
    )


def prf_from_counts(n_matched, n_preds, n_gts) -> PRF:
    precision = n_matched / n_preds if n_preds else 0.0
    recall = n_matched / n_gts if n_gts else 0.0
    total = precision + recall
    f_measure = 2.0 * precision * recall / total if total > 0 else 0.0
    return PRF(precision=precision, recall=recall, f_measure=f_measure)


def prf(m: MatchResult) -> PRF:
    return prf_from_counts(len(m.pairs), m.n_preds, m.n_gts)


def mask_counts(scene: Scene, masks) -> Tuple[int, int, int]:
    """``(true selected, selected, true in words)`` over all word masks of a scene.

    A candidate is true when it carries the provenance of a ground-truth
    character.
    """
    by_id = scene.candidate_by_id()
    tp = n_selected = n_true = 0
    for mask in masks:
        anno = scene.words[mask.word_index]
        selected = [by_id[i] for i in mask.selected_ids]
        n_selected += len(selected)
        tp += sum(1 for c in selected if c.provenance is not None)
        n_true += sum(1 for c in scene.candidates if c.provenance is not None and anno.contains(c.center))
    return tp, n_selected, n_true


@dataclass(frozen=True)
class EvalRow:
    scene_id: str
    n_preds: int
    n_gts: int
    n_matched: int


def evaluate_words(scene: Scene, detections: Sequence[Tuple[AABox, float]],
                   iou_threshold: float = EVAL_IOU_THRESHOLD) -> EvalRow:
    gts = [w.aabox for w in scene.words]
    result = match(list(detections), gts, iou_threshold)
    return EvalRow(scene_id=scene.id or "", n_preds=result.n_preds, n_gts=result.n_gts, n_matched=len(result.pairs))


def evaluate_chars(scene: Scene, iou_threshold: float = EVAL_IOU_THRESHOLD,
                   score_floor: float = DEFAULT_GROUP_SCORE_FLOOR) -> EvalRow:
    """Candidates above ``score_floor``, after NMS, against the ground-truth characters."""
    kept = nms([c for c in scene.candidates if c.score >= score_floor], NMS_IOU_THRESHOLD)
    result = match([(c.box, c.score) for c in kept], scene.gt_chars or [], iou_threshold)
    return EvalRow(scene_id=scene.id or "", n_preds=result.n_preds, n_gts=result.n_gts, n_matched=len(result.pairs))


def evaluation_frame(rows: Sequence[EvalRow]) -> pd.DataFrame:
    """Per-scene P/R/F plus a micro-averaged ``all`` row."""
    records = []
    totals = EvalRow(scene_id="all", n_preds=sum(r.n_preds for r in rows), n_gts=sum(r.n_gts for r in rows),
                     n_matched=sum(r.n_matched for r in rows))
    for row in list(rows) + [totals]:
        scores = prf_from_counts(row.n_matched, row.n_preds, row.n_gts)
        records.append({
            "scene": row.scene_id,
            "preds": row.n_preds,
            "gts": row.n_gts,
            "matched": row.n_matched,
            "precision": scores.precision,
            "recall": scores.recall,
            "f_measure": scores.f_measure,
        })
    return pd.DataFrame.from_records(records, columns=["scene", "preds", "gts", "matched",
                                                       "precision", "recall", "f_measure"])


def write_evaluation(path, frame: pd.DataFrame):
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


# Detection documents

class DetectionDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    box: Tuple[float, float, float, float]
    score: float = 1.0
    group_id: Optional[int] = None


class SceneDetectionsDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene: str
    detections: List[DetectionDoc]


def detections_to_doc(scene_id, detections):
    """``detections``: iterable of ``(box, score, group_id)``."""
    return {
        "scene": scene_id,
        "detections": [{"box": box.as_list(), "score": score, "group_id": gid} for box, score, gid in detections],
    }


def detections_from_doc(doc):
    """Map scene id to its ``[(box, score)]`` list."""
    out = {}
    for item in validate_doc(List[SceneDetectionsDoc], doc, "detections"):
        out[item.scene] = [(parse_box(d.box, f"{item.scene}.detections.{i}"), d.score)
                           for i, d in enumerate(item.detections)]
    return out
