"""Scene interchange documents and the label-assignment utilities.

A scene document is JSON::

    {"id": "scene_0000", "image": "images/scene_0000.pgm",
     "candidates": [{"id": 0, "box": [x0, y0, x1, y1], "score": 0.9}],
     "words": [{"box": [...], "char_count": 4, "text": "SALE"},
               {"quad": [[x, y], [x, y], [x, y], [x, y]]}],
     "gt_chars": [[...]], "gt_lines": [[0, 1, 2]]}

Batches are JSON arrays of such objects and are streamed with ijson.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import ijson
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from charline.constants import ANCHOR_DIAGONALS, NMS_IOU_THRESHOLD, POSITIVE_BAND
from charline.errors import SceneParseError, SceneValidationError
from charline.geom import AABox, Point, Quad, nms
from charline.utils import write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CharCandidate:
    box: AABox
    score: float
    id: int
    features: Tuple[float, ...] = ()
    provenance: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise SceneValidationError(f"Candidate {self.id} has score {self.score} outside [0, 1].")

    @property
    def center(self):
        return self.box.center


@dataclass(frozen=True)
class WordAnnotation:
    region: Union[AABox, Quad]
    char_count: Optional[int] = None
    transcription: Optional[str] = None

    def __post_init__(self):
        if self.region_area <= 0:
            raise SceneValidationError("Word region must have positive area.")
        if self.char_count is not None and self.char_count < 1:
            raise SceneValidationError(f"char_count must be >= 1, got {self.char_count}.")

    @property
    def is_quad(self):
        return isinstance(self.region, Quad)

    @property
    def aabox(self):
        return self.region.aabox if self.is_quad else self.region

    @property
    def region_area(self):
        return self.region.area

    def contains(self, point: Point):
        return self.region.contains(point)


@dataclass(frozen=True)
class AnchorSpec:
    diagonals: Tuple[float, ...] = ANCHOR_DIAGONALS
    positive_band: Tuple[float, float] = POSITIVE_BAND

    def __post_init__(self):
        if not self.diagonals or any(d <= 0 for d in self.diagonals):
            raise ValueError(f"Anchor diagonals must be positive, got {self.diagonals}.")
        if any(a <= b for a, b in zip(self.diagonals, self.diagonals[1:])):
            raise ValueError(f"Anchor diagonals must be strictly decreasing, got {self.diagonals}.")
        low, high = self.positive_band
        if not (low < 1.0 < high):
            raise ValueError(f"Positive band must satisfy low < 1 < high, got {self.positive_band}.")


@dataclass
class Scene:
    candidates: List[CharCandidate]
    words: List[WordAnnotation]
    image: Optional[str] = None
    gt_chars: Optional[List[AABox]] = None
    gt_lines: Optional[List[List[int]]] = None
    id: Optional[str] = None

    def candidate_by_id(self):
        return {c.id: c for c in self.candidates}


# Document schema

class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CandidateDoc(_Doc):
    id: int
    box: Tuple[float, float, float, float]
    score: float
    features: List[float] = Field(default_factory=list)
    provenance: Optional[int] = None


class WordDoc(_Doc):
    box: Optional[Tuple[float, float, float, float]] = None
    quad: Optional[Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float], Tuple[float, float]]] = None
    char_count: Optional[int] = None
    text: Optional[str] = None

    @model_validator(mode="after")
    def _one_region(self):
        if (self.box is None) == (self.quad is None):
            raise ValueError("a word needs exactly one of 'box' or 'quad'")
        return self


class SceneDoc(_Doc):
    id: Optional[str] = None
    image: Optional[str] = None
    candidates: List[CandidateDoc] = Field(default_factory=list)
    words: List[WordDoc] = Field(default_factory=list)
    gt_chars: Optional[List[Tuple[float, float, float, float]]] = None
    gt_lines: Optional[List[List[int]]] = None


def _format_validation_error(exc: ValidationError):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_box(values, where):
    try:
        return AABox(*values)
    except ValueError as exc:
        raise SceneValidationError(f"{where}: {exc}") from exc


def validate_doc(schema, data, what):
    """Validate ``data`` against a pydantic type; errors name the field path."""
    try:
        return TypeAdapter(schema).validate_python(data)
    except ValidationError as exc:
        raise SceneParseError(f"Invalid {what} document: {_format_validation_error(exc)}") from exc


def scene_from_dict(data) -> Scene:
    try:
        doc = SceneDoc.model_validate(data)
    except ValidationError as exc:
        raise SceneParseError(f"Invalid scene document: {_format_validation_error(exc)}") from exc

    seen = set()
    candidates = []
    for i, c in enumerate(doc.candidates):
        if c.id in seen:
            raise SceneValidationError(f"candidates.{i}: duplicate candidate id {c.id}.")
        seen.add(c.id)
        if not (math.isfinite(c.score) and 0.0 <= c.score <= 1.0):
            raise SceneValidationError(f"candidates.{i}: score {c.score} outside [0, 1].")
        candidates.append(CharCandidate(
            box=parse_box(c.box, f"candidates.{i}.box"),
            score=c.score,
            id=c.id,
            features=tuple(c.features),
            provenance=c.provenance,
        ))

    words = []
    for i, w in enumerate(doc.words):
        try:
            region = AABox(*w.box) if w.box is not None else Quad.from_points(w.quad)
        except ValueError as exc:
            raise SceneValidationError(f"words.{i}: {exc}") from exc
        words.append(WordAnnotation(region=region, char_count=w.char_count, transcription=w.text))

    gt_chars = None
    if doc.gt_chars is not None:
        gt_chars = [parse_box(b, f"gt_chars.{i}") for i, b in enumerate(doc.gt_chars)]
    if doc.gt_lines is not None:
        n_gt = len(gt_chars or [])
        for i, line in enumerate(doc.gt_lines):
            if any(not (0 <= j < n_gt) for j in line):
                raise SceneValidationError(f"gt_lines.{i}: index outside gt_chars.")
    return Scene(candidates=candidates, words=words, image=doc.image,
                 gt_chars=gt_chars, gt_lines=doc.gt_lines, id=doc.id)


def parse_scene(data: Union[bytes, str]) -> Scene:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SceneParseError(f"Scene document is not UTF-8: {exc}") from exc
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scene_from_dict(raw)


def scene_to_dict(scene: Scene):
    doc = {}
    if scene.id is not None:
        doc["id"] = scene.id
    if scene.image is not None:
        doc["image"] = scene.image
    candidates = []
    for c in scene.candidates:
        item = {"id": c.id, "box": c.box.as_list(), "score": c.score}
        if c.features:
            item["features"] = list(c.features)
        if c.provenance is not None:
            item["provenance"] = c.provenance
        candidates.append(item)
    doc["candidates"] = candidates
    words = []
    for w in scene.words:
        if w.is_quad:
            item = {"quad": [list(p.as_tuple()) for p in w.region.points]}
        else:
            item = {"box": w.region.as_list()}
        if w.char_count is not None:
            item["char_count"] = w.char_count
        if w.transcription is not None:
            item["text"] = w.transcription
        words.append(item)
    doc["words"] = words
    if scene.gt_chars is not None:
        doc["gt_chars"] = [b.as_list() for b in scene.gt_chars]
    if scene.gt_lines is not None:
        doc["gt_lines"] = [list(line) for line in scene.gt_lines]
    return doc


def serialize_scene(scene: Scene) -> bytes:
    return json.dumps(scene_to_dict(scene), ensure_ascii=False).encode("utf-8")


def iter_scene_docs(path):
    """Yield raw scene objects from a file holding one scene or an array of scenes."""
    with open(path, "rb") as handle:
        head = handle.read(64).lstrip()
        handle.seek(0)
        prefix = "item" if head.startswith(b"[") else ""
        try:
            for item in ijson.items(handle, prefix, use_float=True):
                yield item
        except ijson.JSONError as exc:
            raise SceneParseError(f"{path}: {exc}") from exc


def load_scenes(path) -> List[Scene]:
    base = os.path.dirname(os.path.abspath(path))
    scenes = []
    for i, item in enumerate(iter_scene_docs(path)):
        try:
            scene = scene_from_dict(item)
        except (SceneParseError, SceneValidationError) as exc:
            raise type(exc)(f"{path}: scene {i}: {exc}") from exc
        if scene.id is None:
            scene.id = f"scene_{i:04d}"
        if scene.image is not None and not os.path.isabs(scene.image):
            scene.image = os.path.join(base, scene.image)
        scenes.append(scene)
    logger.info(f"Loaded {len(scenes)} scenes from {path}.")
    return scenes


def dump_scenes(path, scenes: Sequence[Scene], image_root=None):
    """Write a batch; image paths are stored relative to ``image_root`` when given."""
    docs = []
    for scene in scenes:
        doc = scene_to_dict(scene)
        if image_root is not None and "image" in doc:
            doc["image"] = os.path.relpath(doc["image"], image_root)
        docs.append(doc)
    write_json(path, docs)


def assign_anchor_labels(gt_chars: Sequence[AABox], anchors: AnchorSpec = AnchorSpec()):
    """Index of the matched anchor per character, or None when unmatched.

    A character matches anchor ``a`` when diag(char) / diag(a) lies in the
    half-open band [low, high); among several matches the ratio closest to 1
    in log space wins, then the lower index.
    """
    low, high = anchors.positive_band
    labels = []
    for box in gt_chars:
        diag = box.diagonal
        best = None
        for index, anchor in enumerate(anchors.diagonals):
            ratio = diag / anchor
            if not (low <= ratio < high):
                continue
            key = (abs(math.log(ratio)), index)
            if best is None or key < best[0]:
                best = (key, index)
        labels.append(None if best is None else best[1])
    return labels


def candidates_to_anchor_targets(candidates: Sequence[CharCandidate], anchors: AnchorSpec = AnchorSpec(),
                                 iou_threshold=NMS_IOU_THRESHOLD):
    """NMS the candidates, then assign each survivor to an anchor.

    Returns ``(survivors, labels)`` aligned by position.
    """
    survivors = nms(list(candidates), iou_threshold)
    labels = assign_anchor_labels([c.box for c in survivors], anchors)
    return survivors, labels
