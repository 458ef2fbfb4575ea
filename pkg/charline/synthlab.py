"""Synthetic text scenes with ground truth, and a simulated word-supervised training loop.

Scenes are lines of rectangular "glyphs" laid along straight, slanted, sine
or arc center lines.  Candidates are the glyph boxes with jitter plus
distractors; every candidate carries latent feature channels drawn from a
"text" or a "background" law, which a logistic scorer turns into scores.

The simulator alternates mask generation and scorer updates: masks from the
current scores become weighted labels for one gradient step, and the new
scores feed the next round of masks.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from scipy.special import expit

from charline.constants import DEFAULT_LEARNING_RATE, DEFAULT_SIM_ITERS, FEATURE_NAMES
from charline.errors import SceneValidationError
from charline.evalkit import mask_counts, prf_from_counts
from charline.geom import AABox, Quad, rotate_points
from charline.ingest import CharCandidate, Scene, WordAnnotation
from charline.maskgen import MaskScoreParams, generate_masks, loss_weight, min_area_rect
from charline.rectify import RasterImage
from charline.utils import ordered_map

logger = logging.getLogger(__name__)

CURVES = ("straight", "slanted", "sine", "arc")
LAYOUTS = ("stacked", "crossing")
DISTRACTOR_LAWS = ("off_line", "on_line", "uniform", "mixed")
MIXED_CYCLE = ("off_line", "off_line", "on_line")
SCORERS = ("untrained", "oracle")

BACKGROUND_LEVEL = 230
GLYPH_LEVEL = 30
SUPERSAMPLE = 4
ORACLE_WEIGHT = 4.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = field(default=0)
    n_lines: int = field(default=2)
    chars_per_line: Tuple[int, int] = field(default=(8, 12))
    words_per_line: Tuple[int, int] = field(default=(1, 2))
    curve: str = field(default="straight")
    layout: str = field(default="stacked")
    rotation_deg: float = field(default=0.0)
    slant_deg: float = field(default=30.0)
    # sine amplitude in character heights, period in character pitches
    amplitude: float = field(default=1.0)
    wavelength: float = field(default=24.0)
    # arc radius in character heights
    arc_radius: float = field(default=12.0)
    char_height: Tuple[float, float] = field(default=(18.0, 26.0))
    aspect: float = field(default=0.7)
    # center distance over character width
    spacing: float = field(default=1.15)
    # extra space between words, in character heights
    word_gap: float = field(default=1.0)
    jitter: float = field(default=1.0)
    distractors: int = field(default=6)
    distractor_law: str = field(default="mixed")
    feature_noise: float = field(default=0.6)
    word_pad: float = field(default=0.0)
    quad_words: bool = field(default=False)
    char_counts: bool = field(default=False)
    render: bool = field(default=True)
    initial_scorer: str = field(default="untrained")

    def __post_init__(self):
        for name in ("chars_per_line", "words_per_line", "char_height"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} must be a non-empty positive range, got {(lo, hi)}.")
        if self.chars_per_line[0] < 2:
            raise ValueError(f"Lines need at least 2 characters, got {self.chars_per_line}.")
        if self.n_lines < 1:
            raise ValueError(f"n_lines must be positive, got {self.n_lines}.")
        if self.curve not in CURVES:
            raise ValueError(f"Unknown curve {self.curve!r}; expected one of {CURVES}.")
        if self.layout not in LAYOUTS:
            raise ValueError(f"Unknown layout {self.layout!r}; expected one of {LAYOUTS}.")
        if self.layout == "crossing" and self.n_lines != 2:
            raise ValueError(f"The crossing layout takes exactly 2 lines, got {self.n_lines}.")
        if self.distractor_law not in DISTRACTOR_LAWS:
            raise ValueError(f"Unknown distractor law {self.distractor_law!r}; expected one of {DISTRACTOR_LAWS}.")
        if self.initial_scorer not in SCORERS:
            raise ValueError(f"Unknown scorer {self.initial_scorer!r}; expected one of {SCORERS}.")
        for name in ("jitter", "feature_noise", "word_pad", "word_gap", "amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}.")
        if self.distractors < 0:
            raise ValueError(f"distractors must be >= 0, got {self.distractors}.")
        if self.aspect <= 0 or self.spacing < 1.0 or self.wavelength <= 0 or self.arc_radius <= 0:
            raise ValueError("aspect, wavelength and arc_radius must be positive and spacing >= 1.")


@dataclass(frozen=True)
class ScorerState:
    """Logistic scorer over candidate feature channels."""
    weights: Tuple[float, ...]
    bias: float = 0.0
    learning_rate: float = DEFAULT_LEARNING_RATE
    iteration: int = 0

    def __post_init__(self):
        if not all(math.isfinite(w) for w in self.weights + (self.bias,)):
            raise ValueError(f"Scorer weights must be finite, got {self.weights}, bias {self.bias}.")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}.")

    @classmethod
    def untrained(cls, n_features=len(FEATURE_NAMES), learning_rate=DEFAULT_LEARNING_RATE):
        return cls(weights=(0.0,) * n_features, learning_rate=learning_rate)

    @classmethod
    def oracle(cls, learning_rate=DEFAULT_LEARNING_RATE):
        """Separator on the two appearance channels, whose text and background means are +1 and -1."""
        weights = tuple(ORACLE_WEIGHT if name.startswith("appearance") else 0.0 for name in FEATURE_NAMES)
        return cls(weights=weights, learning_rate=learning_rate)

    @classmethod
    def named(cls, name, learning_rate=DEFAULT_LEARNING_RATE):
        if name == "untrained":
            return cls.untrained(learning_rate=learning_rate)
        if name == "oracle":
            return cls.oracle(learning_rate=learning_rate)
        raise ValueError(f"Unknown scorer {name!r}; expected one of {SCORERS}.")

    def score(self, features):
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != len(self.weights):
            raise ValueError(f"Expected features of shape (n, {len(self.weights)}), got {x.shape}.")
        return expit(x @ np.asarray(self.weights) + self.bias)

    def step(self, grad_weights, grad_bias):
        w = np.asarray(self.weights) - self.learning_rate * np.asarray(grad_weights, dtype=float)
        b = self.bias - self.learning_rate * float(grad_bias)
        return replace(self, weights=tuple(float(v) for v in w), bias=float(b), iteration=self.iteration + 1)


@dataclass
class SyntheticScene:
    scene: Scene
    image: Optional[RasterImage]
    # dense samples of each line's center curve, image coordinates
    line_paths: List[np.ndarray]
    # glyph rectangles as (4, 2) corner arrays, aligned with scene.gt_chars
    glyphs: List[np.ndarray]


# Curves

def _curve(spec: SceneSpec, length, char_h, pitch):
    """Dense samples of a curve starting at the origin, heading +x, with arc lengths."""
    if spec.curve == "sine":
        amp = spec.amplitude * char_h
        period = spec.wavelength * pitch
        # arc length >= x, so sampling x over [0, length] reaches past the last character
        x = np.linspace(0.0, length, 4096)
        pts = np.stack([x, amp * np.sin(2 * math.pi * x / period)], axis=1)
    elif spec.curve == "arc":
        radius = spec.arc_radius * char_h
        s = np.linspace(0.0, length, 1024)
        pts = np.stack([radius * np.sin(s / radius), radius * (1.0 - np.cos(s / radius))], axis=1)
    else:
        x = np.linspace(0.0, length, 2)
        pts = np.stack([x, np.zeros_like(x)], axis=1)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return pts, arc


def _sample_along(pts, arc, positions):
    """Points and tangent angles at the given arc lengths."""
    x = np.interp(positions, arc, pts[:, 0])
    y = np.interp(positions, arc, pts[:, 1])
    heading = np.unwrap(np.arctan2(np.gradient(pts[:, 1]), np.gradient(pts[:, 0])))
    angle = np.interp(positions, arc, heading)
    return np.stack([x, y], axis=1), angle


def _glyph(center, angle, width, height):
    c, s = math.cos(angle), math.sin(angle)
    u = np.array([c, s]) * 0.5 * width
    v = np.array([-s, c]) * 0.5 * height
    return np.array([center - u - v, center + u - v, center + u + v, center - u + v])


def _word_sizes(rng, n_chars, n_words):
    """Split ``n_chars`` into ``n_words`` runs of at least two characters."""
    n_words = max(1, min(n_words, n_chars // 2))
    extra = rng.multinomial(n_chars - 2 * n_words, [1.0 / n_words] * n_words)
    return [2 + int(e) for e in extra]


@dataclass
class _Line:
    char_h: float
    char_w: float
    centers: np.ndarray
    angles: np.ndarray
    words: List[List[int]]
    path: np.ndarray

    def transform(self, angle, offset):
        self.centers = rotate_points(self.centers, angle) + offset
        self.path = rotate_points(self.path, angle) + offset
        self.angles = self.angles + angle


def _build_line(spec: SceneSpec, rng):
    char_h = float(rng.uniform(*spec.char_height))
    char_w = spec.aspect * char_h
    pitch = spec.spacing * char_w
    n_chars = int(rng.integers(spec.chars_per_line[0], spec.chars_per_line[1] + 1))
    n_words = int(rng.integers(spec.words_per_line[0], spec.words_per_line[1] + 1))
    positions, words, cursor, index = [], [], 0.5 * char_w, 0
    for size in _word_sizes(rng, n_chars, n_words):
        words.append(list(range(index, index + size)))
        for _ in range(size):
            positions.append(cursor)
            cursor += pitch
            index += 1
        cursor += spec.word_gap * char_h
    length = positions[-1] + 0.5 * char_w
    pts, arc = _curve(spec, length, char_h, pitch)
    centers, angles = _sample_along(pts, arc, np.asarray(positions))
    return _Line(char_h=char_h, char_w=char_w, centers=centers, angles=angles, words=words, path=pts)


def _lay_out(spec: SceneSpec, lines: List[_Line], rng):
    base = math.radians(spec.rotation_deg + (spec.slant_deg if spec.curve == "slanted" else 0.0))
    if spec.layout == "crossing":
        for k, line in enumerate(lines):
            mid = 0.5 * (line.centers[0] + line.centers[-1])
            line.transform(0.0, -mid)
            line.transform(base + k * 0.5 * math.pi, np.zeros(2))
        return
    normal = np.array([-math.sin(base), math.cos(base)])
    offset = 0.0
    for k, line in enumerate(lines):
        spread = float(np.ptp(line.centers[:, 1]))
        shift = float(rng.uniform(0.0, 2.0 * line.char_h))
        line.transform(0.0, np.array([shift, -line.centers[:, 1].min()]))
        line.transform(base, offset * normal)
        offset += spread + 2.5 * line.char_h


def _drop_crossed(lines: List[_Line]):
    """Remove characters of the second line within a band of the first line's glyphs.

    The band spans 3.5 character heights across the first line.
    """
    first, second = lines
    blocked = [AABox.from_points(_glyph(c, a, first.char_w + 0.5 * first.char_h, 3.5 * first.char_h))
               for c, a in zip(first.centers, first.angles)]
    keep = []
    for i, (c, a) in enumerate(zip(second.centers, second.angles)):
        box = AABox.from_points(_glyph(c, a, second.char_w, second.char_h))
        if all(box.xmax < b.xmin or b.xmax < box.xmin or box.ymax < b.ymin or b.ymax < box.ymin
               for b in blocked):
            keep.append(i)
    remap = {old: new for new, old in enumerate(keep)}
    words = []
    for word in second.words:
        run = []
        for i in word + [None]:
            if i is not None and i in remap:
                run.append(remap[i])
                continue
            if run:
                words.append(run)
            run = []
    second.centers = second.centers[keep]
    second.angles = second.angles[keep]
    second.words = words


# Candidates

def _features(rng, box: AABox, mean_diag, jitter_mag, text, noise):
    log_aspect = math.log(max(box.width, 1e-3) / max(box.height, 1e-3))
    diagonal = box.diagonal / mean_diag - 1.0
    mean = 1.0 if text else -1.0
    appearance = rng.normal(mean, noise, size=2)
    return (log_aspect, diagonal, jitter_mag, float(appearance[0]), float(appearance[1]))


def _distractor_box(rng, law, lines: List[_Line], bounds: AABox):
    """One distractor box.

    ``off_line`` boxes sit over a character, pushed off the center line but
    kept inside the line's band; ``on_line`` boxes sit between two
    neighbouring characters of a word; ``uniform`` boxes land anywhere.
    """
    if law == "uniform":
        line = lines[int(rng.integers(len(lines)))]
        w = float(rng.uniform(0.5, 1.0)) * line.char_w
        h = float(rng.uniform(0.5, 1.0)) * line.char_h
        cx = float(rng.uniform(bounds.xmin + w, bounds.xmax - w))
        cy = float(rng.uniform(bounds.ymin + h, bounds.ymax - h))
        return AABox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    pairs = [(line, word[k], word[k + 1]) for line in lines for word in line.words for k in range(len(word) - 1)]
    if law == "on_line" and pairs:
        line, i, j = pairs[int(rng.integers(len(pairs)))]
        center = 0.5 * (line.centers[i] + line.centers[j])
        angle = 0.5 * (line.angles[i] + line.angles[j])
        w, h = 0.3 * line.char_w, 0.5 * line.char_h
        shift = float(rng.uniform(-0.1, 0.1)) * line.char_h
    else:
        chars = [(line, i) for line in lines for i in range(len(line.centers))]
        line, i = chars[int(rng.integers(len(chars)))]
        center, angle = line.centers[i], line.angles[i]
        w = h = float(rng.uniform(0.1, 0.2)) * line.char_h
        shift = (1.0 if rng.random() < 0.5 else -1.0) * float(rng.uniform(0.25, 0.35)) * line.char_h
    normal = np.array([-math.sin(angle), math.cos(angle)])
    return AABox.from_points(_glyph(center + shift * normal, angle, w, h))


def _word_region(spec: SceneSpec, corners, pad):
    if spec.quad_words:
        rect = min_area_rect(corners)
        u = rect[1] - rect[0]
        v = rect[3] - rect[0]
        u = u / np.linalg.norm(u) * pad
        v = v / np.linalg.norm(v) * pad
        return Quad.from_points([rect[0] - u - v, rect[1] + u - v, rect[2] + u + v, rect[3] - u + v])
    box = AABox.from_points(corners)
    return AABox(box.xmin - pad, box.ymin - pad, box.xmax + pad, box.ymax + pad)


def render_scene(width, height, glyphs) -> RasterImage:
    """Dark glyph polygons on a light background, box-filtered from a supersampled canvas."""
    canvas = Image.new("L", (width * SUPERSAMPLE, height * SUPERSAMPLE), BACKGROUND_LEVEL)
    draw = ImageDraw.Draw(canvas)
    for glyph in glyphs:
        draw.polygon([(float(x) * SUPERSAMPLE, float(y) * SUPERSAMPLE) for x, y in glyph], fill=GLYPH_LEVEL)
    small = canvas.resize((width, height), Image.Resampling.BOX)
    return RasterImage.from_array(np.array(small))


def generate_scene(spec: SceneSpec, scene_id: Optional[str] = None) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    lines = [_build_line(spec, rng) for _ in range(spec.n_lines)]
    _lay_out(spec, lines, rng)
    if spec.layout == "crossing":
        _drop_crossed(lines)

    glyph_sets = [[_glyph(c, a, line.char_w, line.char_h) for c, a in zip(line.centers, line.angles)]
                  for line in lines]
    all_corners = np.concatenate([np.concatenate(g) for g in glyph_sets if g])
    margin = 2.0 * spec.char_height[1]
    offset = margin - all_corners.min(axis=0)
    width = int(math.ceil(float(np.ptp(all_corners[:, 0])) + 2 * margin))
    height = int(math.ceil(float(np.ptp(all_corners[:, 1])) + 2 * margin))
    for line in lines:
        line.transform(0.0, offset)
    glyph_sets = [[g + offset for g in gs] for gs in glyph_sets]
    bounds = AABox(0.0, 0.0, float(width), float(height))

    glyphs, gt_chars, gt_lines, words = [], [], [], []
    for line, gs in zip(lines, glyph_sets):
        first = len(glyphs)
        glyphs.extend(gs)
        gt_chars.extend(AABox.from_points(g) for g in gs)
        gt_lines.append(list(range(first, first + len(gs))))
        for word in line.words:
            corners = np.concatenate([gs[i] for i in word])
            region = _word_region(spec, corners, spec.word_pad * line.char_h)
            words.append(WordAnnotation(region=region, char_count=len(word) if spec.char_counts else None))
    mean_diag = float(np.mean([b.diagonal for b in gt_chars]))
    char_heights = [line.char_h for line, gs in zip(lines, glyph_sets) for _ in gs]

    raw = []
    for index, box in enumerate(gt_chars):
        noise = rng.normal(0.0, spec.jitter, size=4)
        xs = sorted((box.xmin + noise[0], box.xmax + noise[2]))
        ys = sorted((box.ymin + noise[1], box.ymax + noise[3]))
        jittered = AABox(xs[0], ys[0], xs[1], ys[1])
        jitter_mag = float(np.linalg.norm(noise)) / char_heights[index]
        raw.append((jittered, _features(rng, jittered, mean_diag, jitter_mag, True, spec.feature_noise), index))
    for k in range(spec.distractors):
        law = MIXED_CYCLE[k % len(MIXED_CYCLE)] if spec.distractor_law == "mixed" else spec.distractor_law
        box = _distractor_box(rng, law, lines, bounds)
        jitter_mag = float(rng.uniform(0.0, 0.5))
        raw.append((box, _features(rng, box, mean_diag, jitter_mag, False, spec.feature_noise), None))

    ids = rng.permutation(len(raw))
    scorer = ScorerState.named(spec.initial_scorer)
    scores = scorer.score([features for _, features, _ in raw]) if raw else []
    candidates = sorted(
        (CharCandidate(box=box, score=float(score), id=int(cid), features=features, provenance=prov)
         for (box, features, prov), score, cid in zip(raw, scores, ids)),
        key=lambda c: c.id,
    )

    image = render_scene(width, height, glyphs) if spec.render else None
    scene = Scene(candidates=candidates, words=words, gt_chars=gt_chars, gt_lines=gt_lines, id=scene_id)
    logger.debug(f"Scene seed={spec.seed}: {len(gt_chars)} characters, {len(words)} words, "
                 f"{spec.distractors} distractors, {width}x{height}.")
    return SyntheticScene(scene=scene, image=image, line_paths=[line.path for line in lines], glyphs=glyphs)


# Weak-supervision simulation

@dataclass(frozen=True)
class SimParams:
    iters: int = field(default=DEFAULT_SIM_ITERS)
    learning_rate: float = field(default=DEFAULT_LEARNING_RATE)
    scorer: str = field(default="untrained")

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}.")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}.")
        if self.scorer not in SCORERS:
            raise ValueError(f"Unknown scorer {self.scorer!r}; expected one of {SCORERS}.")


@dataclass(frozen=True)
class SimRow:
    iteration: int
    f1: float
    mean_s: float


@dataclass(frozen=True)
class SimReport:
    rows: Tuple[SimRow, ...]
    final_scorer: ScorerState

    @property
    def f1_trace(self):
        return [row.f1 for row in self.rows]

    def to_frame(self):
        return pd.DataFrame([vars(row) for row in self.rows], columns=["iteration", "f1", "mean_s"])

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def rescore(scene: Scene, scorer: ScorerState) -> Scene:
    if not scene.candidates:
        return scene
    if any(not c.features for c in scene.candidates):
        raise SceneValidationError(f"Scene {scene.id}: every candidate needs feature channels to be rescored.")
    scores = scorer.score([c.features for c in scene.candidates])
    candidates = [replace(c, score=float(s)) for c, s in zip(scene.candidates, scores)]
    return replace(scene, candidates=candidates)


def _scene_round(scene: Scene, scorer: ScorerState, params: MaskScoreParams):
    """Masks, F1 counts and the unnormalised weighted logistic gradient for one scene."""
    scored = rescore(scene, scorer)
    masks = generate_masks(scored, params)
    counts = mask_counts(scored, masks)

    grad_w = np.zeros(len(scorer.weights))
    grad_b = 0.0
    total = 0.0
    for mask in masks:
        weight = max(loss_weight(mask), 0.0)
        if weight == 0.0:
            continue
        anno = scored.words[mask.word_index]
        inside = [c for c in scored.candidates if anno.contains(c.center)]
        selected = set(mask.selected_ids)
        x = np.array([c.features for c in inside], dtype=float)
        y = np.array([1.0 if c.id in selected else 0.0 for c in inside])
        residual = scorer.score(x) - y
        grad_w += weight * residual @ x
        grad_b += weight * float(residual.sum())
        total += weight * len(inside)
    return counts, [m.s for m in masks], grad_w, grad_b, total


def simulate_weak_training(scenes: Sequence[Scene], scorer0: ScorerState, iters: int = DEFAULT_SIM_ITERS,
                           params: MaskScoreParams = MaskScoreParams(), jobs: int = 1) -> SimReport:
    """Alternate mask generation and scorer updates for ``iters`` rounds.

    Row ``t`` describes the masks produced by the scorer after ``t`` updates,
    so a run has ``iters + 1`` rows.
    """
    scenes = list(scenes)
    scorer = scorer0
    rows = []
    for t in range(iters + 1):
        results = ordered_map(lambda s: _scene_round(s, scorer, params), scenes, jobs=jobs,
                              desc=f"Iteration {t}")
        tp = n_sel = n_true = 0
        scores = []
        grad_w = np.zeros(len(scorer.weights))
        grad_b = 0.0
        total = 0.0
        for counts, mask_scores, gw, gb, tw in results:
            tp, n_sel, n_true = tp + counts[0], n_sel + counts[1], n_true + counts[2]
            scores.extend(mask_scores)
            grad_w += gw
            grad_b += gb
            total += tw
        f1 = prf_from_counts(tp, n_sel, n_true).f_measure
        mean_s = float(np.mean(scores)) if scores else 0.0
        rows.append(SimRow(iteration=t, f1=f1, mean_s=mean_s))
        logger.debug(f"iteration {t}: f1={f1:.4f} mean_s={mean_s:.4f}")
        if t < iters and total > 0:
            scorer = scorer.step(grad_w / total, grad_b / total)
    logger.info(f"Simulated {iters} iterations over {len(scenes)} scenes: "
                f"f1 {rows[0].f1:.4f} -> {rows[-1].f1:.4f}")
    return SimReport(rows=tuple(rows), final_scorer=scorer)
