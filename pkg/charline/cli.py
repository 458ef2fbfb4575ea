"""Command-line surface: ``charline <command> [options]``.

Commands::

    synth      generate seeded synthetic scenes (scenes.json, images/)
    maskgen    word-supervised character masks (masks.json)
    simulate   alternate masks and scorer updates (sim_report.csv, scenes_trained.json)
    group      text-line grouping (groups.json)
    fitline    line models and text polygons (lines.json)
    rectify    strips per text polygon (strips/, strips.json)
    partition  word partition of each strip (partition.json, detections.json)
    eval       precision / recall / F-measure (eval.csv)
    pipeline   group, fitline, rectify, partition and eval in one run

Settings come from ``--config`` (JSON) and are overridden by flags.
"""
import argparse
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional

from pydantic import BaseModel, ConfigDict

from charline.constants import EVAL_IOU_THRESHOLD
from charline.errors import CharlineError, ConfigError, DegeneratePolygonError, SingularSystemError
from charline.evalkit import (
    detections_from_doc,
    detections_to_doc,
    evaluate_chars,
    evaluate_words,
    evaluation_frame,
    write_evaluation,
)
from charline.grouping import GroupingParams, extract_groups, groups_from_doc, groups_to_doc, ungrouped_ids
from charline.ingest import dump_scenes, load_scenes, validate_doc
from charline.lineshape import lines_from_doc, lines_to_doc, select_model, text_polygon
from charline.maskgen import MaskScoreParams, generate_masks, masks_to_doc
from charline.rectify import RasterImage, RectifyParams, partition_to_doc, partition_words, rectify_strip
from charline.synthlab import SceneSpec, ScorerState, SimParams, generate_scene, rescore, simulate_weak_training
from charline.utils import build_logger, ordered_map, read_json, write_json

logger = logging.getLogger(__name__)

EVAL_LEVELS = ("words", "chars")


def _build_section(cls, values, section):
    if not isinstance(values, dict):
        raise ConfigError(f"Config section '{section}' must be an object.")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in config section '{section}': {', '.join(unknown)}.")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Config section '{section}': {exc}") from exc


@dataclass
class PipelineConfig:
    seed: int = field(default=0)
    jobs: int = field(default=1)
    count: int = field(default=8)
    mask: MaskScoreParams = field(default_factory=MaskScoreParams)
    grouping: GroupingParams = field(default_factory=GroupingParams)
    rectify: RectifyParams = field(default_factory=RectifyParams)
    scene: SceneSpec = field(default_factory=SceneSpec)
    sim: SimParams = field(default_factory=SimParams)
    eval_iou: float = field(default=EVAL_IOU_THRESHOLD)
    eval_level: str = field(default="words")

    _sections = {"mask": MaskScoreParams, "grouping": GroupingParams, "rectify": RectifyParams,
                 "scene": SceneSpec, "sim": SimParams}

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}.")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}.")
        if not (0.0 < self.eval_iou <= 1.0):
            raise ConfigError(f"eval iou must lie in (0, 1], got {self.eval_iou}.")
        if self.eval_level not in EVAL_LEVELS:
            raise ConfigError(f"eval level must be one of {EVAL_LEVELS}, got {self.eval_level!r}.")

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("Config document must be a JSON object.")
        unknown = sorted(set(data) - set(cls._sections) - {"seed", "jobs", "count", "eval"})
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}.")
        kwargs = {key: data[key] for key in ("seed", "jobs", "count") if key in data}
        for key, section_cls in cls._sections.items():
            if key in data:
                kwargs[key] = _build_section(section_cls, data[key], key)
        evaluation = data.get("eval", {})
        if not isinstance(evaluation, dict) or set(evaluation) - {"iou", "level"}:
            raise ConfigError("Config section 'eval' takes only 'iou' and 'level'.")
        if "iou" in evaluation:
            kwargs["eval_iou"] = evaluation["iou"]
        if "level" in evaluation:
            kwargs["eval_level"] = evaluation["level"]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        try:
            data = read_json(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_dict(data)

    def with_overrides(self, args):
        """Apply command-line flags; a flag left unset keeps the config value."""
        def pick(section, **changes):
            changes = {k: v for k, v in changes.items() if v is not None}
            if not changes:
                return section
            try:
                return replace(section, **changes)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

        mask = pick(self.mask, w=args.w, knn_k=args.knn_k, score_floor=args.score_floor)
        grouping = pick(self.grouping, alpha=args.alpha, beta=args.beta, entry_exit_cost=args.entry_exit,
                        k=args.knn_k)
        rectify = pick(self.rectify, strip_height=args.strip_height)
        sim = pick(self.sim, iters=args.iters, learning_rate=args.lr)
        top = {k: v for k, v in (("seed", args.seed), ("jobs", args.jobs), ("count", args.count),
                                 ("eval_iou", args.iou), ("eval_level", args.level)) if v is not None}
        return replace(self, mask=mask, grouping=grouping, rectify=rectify, sim=sim, **top)


# Per-file documents written by this module

class _SceneGroups(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene: str
    groups: List[dict]
    ungrouped: List[int] = []


class _SceneLines(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene: str
    lines: List[dict]


def _require(*paths):
    for path in paths:
        if path is None:
            raise ConfigError("A required input path was not given.")
        if not os.path.exists(path):
            raise FileNotFoundError(f"Input not found: {path}")


def _load_groups(path):
    entries = validate_doc(List[_SceneGroups], read_json(path), "groups file")
    return {entry.scene: groups_from_doc(entry.groups) for entry in entries}


def _load_lines(path):
    entries = validate_doc(List[_SceneLines], read_json(path), "lines file")
    return {entry.scene: lines_from_doc(entry.lines) for entry in entries}


# Per-scene stages

def _chain(scene, char_ids):
    by_id = scene.candidate_by_id()
    missing = [i for i in char_ids if i not in by_id]
    if missing:
        raise CharlineError(f"Scene {scene.id}: unknown candidate ids {missing}.")
    return [by_id[i] for i in char_ids]


def group_scene(scene, config: PipelineConfig):
    """Chains as (group id, char ids) and the scene's entry of groups.json."""
    groups = extract_groups(scene.candidates, config.grouping)
    doc = {"scene": scene.id, "groups": groups_to_doc(groups),
           "ungrouped": ungrouped_ids(scene.candidates, groups, config.grouping)}
    return [(gid, g.char_ids) for gid, g in enumerate(groups)], doc


def fit_scene(scene, chains):
    entries = []
    for gid, char_ids in chains:
        chars = _chain(scene, char_ids)
        model = select_model(chars).chosen
        entries.append((gid, model, text_polygon(chars, model)))
    return entries


def rectify_scene(scene, chains, entries, config: PipelineConfig):
    if not entries:
        return []
    if scene.image is None:
        logger.warning(f"Scene {scene.id} has no image; skipping rectification.")
        return []
    image = RasterImage.read_pgm(scene.image)
    chain_of = dict(chains)
    strips = []
    for gid, model, polygon in entries:
        chars = _chain(scene, chain_of[gid]) if gid in chain_of else None
        try:
            strips.append((gid, rectify_strip(image, polygon, model, chars, config.rectify)))
        except (DegeneratePolygonError, SingularSystemError) as exc:
            logger.warning(f"Scene {scene.id} group {gid}: strip skipped: {exc}")
    return strips


def partition_scene(strips, config: PipelineConfig):
    partitions, detections = [], []
    for gid, strip in strips:
        part = partition_words(strip, config.rectify.min_gap_frac, config.rectify.density_threshold)
        partitions.append(partition_to_doc(gid, part))
        detections.extend((box, 1.0, gid) for box in part.word_boxes)
    return partitions, detections


# Commands

def _write_strips(out, scene_id, strips):
    docs = []
    for gid, strip in strips:
        rel = os.path.join("strips", f"{scene_id}_{gid:03d}.pgm")
        os.makedirs(os.path.join(out, "strips"), exist_ok=True)
        strip.raster.write_pgm(os.path.join(out, rel))
        docs.append({"scene": scene_id, "group_id": gid, "path": rel, "width": strip.width, "height": strip.height})
    return docs


def cmd_synth(args, config: PipelineConfig):
    specs = [(i, replace(config.scene, seed=config.seed + i)) for i in range(config.count)]
    results = ordered_map(lambda item: generate_scene(item[1], scene_id=f"scene_{item[0]:04d}"), specs,
                          jobs=config.jobs, desc="Generating scenes")
    os.makedirs(args.out, exist_ok=True)
    scenes = []
    for result in results:
        scene = result.scene
        if result.image is not None:
            path = os.path.join(args.out, "images", f"{scene.id}.pgm")
            os.makedirs(os.path.dirname(path), exist_ok=True)
            result.image.write_pgm(path)
            scene.image = path
        scenes.append(scene)
    dump_scenes(os.path.join(args.out, "scenes.json"), scenes, image_root=args.out)
    logger.info(f"Wrote {len(scenes)} scenes to {args.out}.")


def cmd_maskgen(args, config: PipelineConfig):
    _require(args.scenes)
    scenes = load_scenes(args.scenes)
    masks = ordered_map(lambda s: generate_masks(s, config.mask), scenes, jobs=config.jobs, desc="Masks")
    doc = [{"scene": s.id, "masks": masks_to_doc(m)} for s, m in zip(scenes, masks)]
    write_json(os.path.join(args.out, "masks.json"), doc)
    n_words = sum(len(m) for m in masks)
    n_empty = sum(1 for ms in masks for m in ms if m.is_empty)
    logger.info(f"Generated masks for {n_words} words ({n_empty} empty).")


def cmd_simulate(args, config: PipelineConfig):
    _require(args.scenes)
    scenes = load_scenes(args.scenes)
    scorer = ScorerState.named(config.sim.scorer, learning_rate=config.sim.learning_rate)
    report = simulate_weak_training(scenes, scorer, config.sim.iters, config.mask, jobs=config.jobs)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "sim_report.csv"))
    trained = [rescore(s, report.final_scorer) for s in scenes]
    dump_scenes(os.path.join(args.out, "scenes_trained.json"), trained, image_root=args.out)
    logger.info(f"Wrote {len(trained)} rescored scenes to {args.out}.")


def cmd_group(args, config: PipelineConfig):
    _require(args.scenes)
    scenes = load_scenes(args.scenes)
    results = ordered_map(lambda s: group_scene(s, config), scenes, jobs=config.jobs, desc="Grouping")
    write_json(os.path.join(args.out, "groups.json"), [doc for _, doc in results])


def cmd_fitline(args, config: PipelineConfig):
    _require(args.scenes, args.groups)
    scenes = load_scenes(args.scenes)
    groups = _load_groups(args.groups)
    results = ordered_map(lambda s: fit_scene(s, groups.get(s.id, [])), scenes, jobs=config.jobs,
                          desc="Fitting lines")
    write_json(os.path.join(args.out, "lines.json"),
               [{"scene": s.id, "lines": lines_to_doc(e)} for s, e in zip(scenes, results)])


def _strips_for(args, config):
    _require(args.scenes, args.groups, args.lines)
    scenes = load_scenes(args.scenes)
    groups = _load_groups(args.groups)
    lines = _load_lines(args.lines)
    strips = ordered_map(lambda s: rectify_scene(s, groups.get(s.id, []), lines.get(s.id, []), config),
                         scenes, jobs=config.jobs, desc="Rectifying")
    return scenes, strips


def cmd_rectify(args, config: PipelineConfig):
    scenes, strips = _strips_for(args, config)
    docs = []
    for scene, scene_strips in zip(scenes, strips):
        docs.extend(_write_strips(args.out, scene.id, scene_strips))
    write_json(os.path.join(args.out, "strips.json"), docs)


def cmd_partition(args, config: PipelineConfig):
    scenes, strips = _strips_for(args, config)
    _write_partitions(args.out, scenes, [partition_scene(s, config) for s in strips])


def _write_partitions(out, scenes, results):
    write_json(os.path.join(out, "partition.json"),
               [{"scene": s.id, "partitions": parts} for s, (parts, _) in zip(scenes, results)])
    write_json(os.path.join(out, "detections.json"),
               [detections_to_doc(s.id, dets) for s, (_, dets) in zip(scenes, results)])


def _evaluate(scenes, detections, config: PipelineConfig):
    if config.eval_level == "chars":
        rows = [evaluate_chars(s, config.eval_iou, config.grouping.score_floor) for s in scenes]
    else:
        rows = [evaluate_words(s, detections.get(s.id, []), config.eval_iou) for s in scenes]
    frame = evaluation_frame(rows)
    total = frame.iloc[-1]
    logger.info(f"{config.eval_level}: P={total['precision']:.4f} R={total['recall']:.4f} "
                f"F={total['f_measure']:.4f}")
    return frame


def cmd_eval(args, config: PipelineConfig):
    if config.eval_level == "words":
        _require(args.scenes, args.detections)
        detections = detections_from_doc(read_json(args.detections))
    else:
        _require(args.scenes)
        detections = {}
    scenes = load_scenes(args.scenes)
    frame = _evaluate(scenes, detections, config)
    os.makedirs(args.out, exist_ok=True)
    write_evaluation(os.path.join(args.out, "eval.csv"), frame)


def cmd_pipeline(args, config: PipelineConfig):
    _require(args.scenes)
    scenes = load_scenes(args.scenes)

    def run(scene):
        chains, group_doc = group_scene(scene, config)
        entries = fit_scene(scene, chains)
        strips = rectify_scene(scene, chains, entries, config)
        return group_doc, entries, strips, partition_scene(strips, config)

    results = ordered_map(run, scenes, jobs=config.jobs, desc="Pipeline")
    out = args.out
    write_json(os.path.join(out, "groups.json"), [r[0] for r in results])
    write_json(os.path.join(out, "lines.json"),
               [{"scene": s.id, "lines": lines_to_doc(r[1])} for s, r in zip(scenes, results)])
    strip_docs = []
    for scene, result in zip(scenes, results):
        strip_docs.extend(_write_strips(out, scene.id, result[2]))
    write_json(os.path.join(out, "strips.json"), strip_docs)
    partitions = [r[3] for r in results]
    _write_partitions(out, scenes, partitions)

    detections = {s.id: [(box, score) for box, score, _ in dets] for s, (_, dets) in zip(scenes, partitions)}
    write_evaluation(os.path.join(out, "eval.csv"), _evaluate(scenes, detections, config))


COMMANDS = {
    "synth": cmd_synth,
    "maskgen": cmd_maskgen,
    "simulate": cmd_simulate,
    "group": cmd_group,
    "fitline": cmd_fitline,
    "rectify": cmd_rectify,
    "partition": cmd_partition,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None)
    common.add_argument("--out", type=str, default="out")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None)
    common.add_argument("--count", type=int, default=None)
    common.add_argument("--scenes", type=str, default=None)
    common.add_argument("--groups", type=str, default=None)
    common.add_argument("--lines", type=str, default=None)
    common.add_argument("--detections", type=str, default=None)
    common.add_argument("--w", type=float, default=None)
    common.add_argument("--knn-k", type=int, default=None)
    common.add_argument("--score-floor", type=float, default=None)
    common.add_argument("--alpha", type=float, default=None)
    common.add_argument("--beta", type=float, default=None)
    common.add_argument("--entry-exit", type=float, default=None)
    common.add_argument("--strip-height", type=int, default=None)
    common.add_argument("--iters", type=int, default=None)
    common.add_argument("--lr", type=float, default=None)
    common.add_argument("--iou", type=float, default=None)
    common.add_argument("--level", choices=EVAL_LEVELS, default=None)
    common.add_argument("--log-file", type=str, default=None)
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), default="INFO")

    parser = argparse.ArgumentParser(prog="charline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def load_config(args) -> PipelineConfig:
    if args.config is not None:
        _require(args.config)
        config = PipelineConfig.from_file(args.config)
    else:
        config = PipelineConfig()
    return config.with_overrides(args)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log = build_logger("charline", log_file=args.log_file, level=args.log_level)
    try:
        config = load_config(args)
        COMMANDS[args.command](args, config)
    except (CharlineError, OSError) as exc:
        log.error(f"{args.command}: {exc}")
        return 2
    return 0
