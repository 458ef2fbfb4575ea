import json
import os
import shutil

import numpy as np
import pandas as pd
import pytest

from charline.cli import PipelineConfig, build_parser, load_config, main
from charline.errors import ConfigError, SceneParseError
from charline.evalkit import detections_to_doc
from charline.grouping import GroupingParams
from charline.ingest import load_scenes
from charline.rectify import RasterImage
from charline.utils import read_json

PIPELINE_OUTPUTS = ("groups.json", "lines.json", "strips.json", "partition.json", "detections.json", "eval.csv")


def _read(path):
    with open(path, "rb") as handle:
        return handle.read()


def _config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def scenes_dir(tmp_path):
    config = _config(tmp_path, {"scene": {"initial_scorer": "oracle", "feature_noise": 0.2}})
    out = tmp_path / "synth"
    assert main(["synth", "--config", config, "--count", "3", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--count", "2", "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert _read(tmp_path / "a" / "scenes.json") == _read(tmp_path / "b" / "scenes.json")
    assert _read(tmp_path / "a" / "images" / "scene_0001.pgm") == _read(tmp_path / "b" / "images" / "scene_0001.pgm")

    scenes = load_scenes(str(tmp_path / "a" / "scenes.json"))
    assert [s.id for s in scenes] == ["scene_0000", "scene_0001"]
    assert all(os.path.isfile(s.image) for s in scenes)
    doc = json.loads((tmp_path / "a" / "scenes.json").read_text())
    assert doc[0]["image"] == os.path.join("images", "scene_0000.pgm")


def test_eval_with_ground_truth_detections(tmp_path, scenes_dir):
    scenes_path = str(scenes_dir / "scenes.json")
    scenes = load_scenes(scenes_path)
    detections = tmp_path / "dets.json"
    detections.write_text(json.dumps([detections_to_doc(s.id, [(w.aabox, 1.0, None) for w in s.words])
                                       for s in scenes]))
    out = tmp_path / "eval"
    assert main(["eval", "--scenes", scenes_path, "--detections", str(detections), "--out", str(out)]) == 0
    frame = pd.read_csv(out / "eval.csv")
    assert list(frame["scene"]) == [s.id for s in scenes] + ["all"]
    assert frame["f_measure"].tolist() == pytest.approx([1.0] * 4)


def test_eval_at_char_level_needs_no_detections(tmp_path, scenes_dir):
    out = tmp_path / "chars"
    assert main(["eval", "--level", "chars", "--scenes", str(scenes_dir / "scenes.json"), "--out", str(out)]) == 0
    assert (out / "eval.csv").is_file()


def test_missing_input_exits_with_two(tmp_path):
    out = tmp_path / "never"
    assert main(["maskgen", "--scenes", str(tmp_path / "absent.json"), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["group", "--out", str(out)]) == 2
    assert main(["eval", "--scenes", str(tmp_path / "absent.json"), "--out", str(out)]) == 2
    assert not out.exists()


def test_bad_config_exits_with_two(tmp_path, scenes_dir):
    scenes = str(scenes_dir / "scenes.json")
    for doc in ({"grouping": {"gamma": 1.0}}, {"colour": 1}, {"grouping": {"alpha": -1.0}},
                {"eval": {"iou": 0.0}}, {"jobs": 0}, [1, 2]):
        config = _config(tmp_path, doc, name="bad.json")
        assert main(["group", "--config", config, "--scenes", scenes, "--out", str(tmp_path / "g")]) == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["group", "--config", str(tmp_path / "broken.json"), "--scenes", scenes,
                 "--out", str(tmp_path / "g")]) == 2
    assert not (tmp_path / "g").exists()


def test_unknown_command_is_rejected():
    with pytest.raises(SystemExit):
        main(["bogus"])
    with pytest.raises(SystemExit):
        main(["group", "--level", "pages"])


def test_flags_override_config(tmp_path):
    config = _config(tmp_path, {"seed": 3, "grouping": {"alpha": 2.0, "beta": 0.5}, "eval": {"level": "chars"},
                                "sim": {"iters": 4}})
    args = build_parser().parse_args(["group", "--config", config, "--alpha", "3.0", "--jobs", "2"])
    loaded = load_config(args)
    assert loaded.seed == 3
    assert loaded.jobs == 2
    assert loaded.grouping.alpha == 3.0
    assert loaded.grouping.beta == 0.5
    assert loaded.eval_level == "chars"
    assert loaded.sim.iters == 4

    args = build_parser().parse_args(["group", "--knn-k", "5", "--lr", "0.1"])
    loaded = load_config(args)
    assert loaded.mask.knn_k == loaded.grouping.k == 5
    assert loaded.sim.learning_rate == 0.1
    assert loaded.grouping == GroupingParams(k=5)


def test_config_validation():
    assert PipelineConfig.from_dict({}) == PipelineConfig()
    assert PipelineConfig.from_dict({"scene": {"chars_per_line": [4, 6]}}).scene.chars_per_line == (4, 6)
    for doc in ({"grouping": 1}, {"eval": {"threshold": 0.5}}, {"eval": {"level": "pages"}}, {"count": 0}):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(doc)


def test_maskgen_and_simulate_outputs(tmp_path, scenes_dir):
    scenes = str(scenes_dir / "scenes.json")
    out = tmp_path / "out"
    assert main(["maskgen", "--scenes", scenes, "--out", str(out)]) == 0
    masks = json.loads((out / "masks.json").read_text())
    loaded = load_scenes(scenes)
    assert [entry["scene"] for entry in masks] == [s.id for s in loaded]
    assert [len(entry["masks"]) for entry in masks] == [len(s.words) for s in loaded]

    assert main(["simulate", "--scenes", scenes, "--iters", "3", "--out", str(out)]) == 0
    report = pd.read_csv(out / "sim_report.csv")
    assert list(report.columns) == ["iteration", "f1", "mean_s"]
    assert list(report["iteration"]) == [0, 1, 2, 3]


def test_pipeline_is_independent_of_jobs(tmp_path, scenes_dir):
    scenes = str(scenes_dir / "scenes.json")
    for jobs in ("1", "4"):
        assert main(["pipeline", "--scenes", scenes, "--jobs", jobs, "--out", str(tmp_path / jobs)]) == 0
    for name in PIPELINE_OUTPUTS:
        assert _read(tmp_path / "1" / name) == _read(tmp_path / "4" / name)
    strips = json.loads((tmp_path / "1" / "strips.json").read_text())
    assert strips
    for doc in strips:
        assert _read(tmp_path / "1" / doc["path"]) == _read(tmp_path / "4" / doc["path"])
        assert doc["height"] == 32


def test_pipeline_matches_chained_commands(tmp_path, scenes_dir):
    scenes = str(scenes_dir / "scenes.json")
    whole, steps = tmp_path / "whole", tmp_path / "steps"
    assert main(["pipeline", "--scenes", scenes, "--out", str(whole)]) == 0

    groups, lines = str(steps / "groups.json"), str(steps / "lines.json")
    assert main(["group", "--scenes", scenes, "--out", str(steps)]) == 0
    assert main(["fitline", "--scenes", scenes, "--groups", groups, "--out", str(steps)]) == 0
    assert main(["rectify", "--scenes", scenes, "--groups", groups, "--lines", lines, "--out", str(steps)]) == 0
    assert main(["partition", "--scenes", scenes, "--groups", groups, "--lines", lines, "--out", str(steps)]) == 0
    assert main(["eval", "--scenes", scenes, "--detections", str(steps / "detections.json"),
                 "--out", str(steps)]) == 0

    for name in PIPELINE_OUTPUTS:
        assert _read(whole / name) == _read(steps / name)


GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "straight_line")


def _assert_close(actual, expected, path="doc"):
    if isinstance(expected, dict):
        assert isinstance(actual, dict) and sorted(actual) == sorted(expected), path
        for key in expected:
            _assert_close(actual[key], expected[key], f"{path}.{key}")
    elif isinstance(expected, list):
        assert isinstance(actual, list) and len(actual) == len(expected), path
        for i, (a, e) in enumerate(zip(actual, expected)):
            _assert_close(a, e, f"{path}.{i}")
    elif isinstance(expected, float):
        assert actual == pytest.approx(expected, rel=1e-9, abs=1e-6), path
    else:
        assert actual == expected, path


def test_pipeline_matches_golden_artifacts(tmp_path):
    shutil.copy(os.path.join(GOLDEN, "scene.json"), tmp_path / "scene.json")
    RasterImage.from_array(np.full((100, 160), 128)).write_pgm(str(tmp_path / "golden.pgm"))
    out = tmp_path / "out"
    assert main(["pipeline", "--scenes", str(tmp_path / "scene.json"), "--out", str(out)]) == 0

    for name in ("groups.json", "lines.json", "strips.json", "partition.json", "detections.json"):
        with open(os.path.join(GOLDEN, name)) as handle:
            expected = json.load(handle)
        _assert_close(json.loads((out / name).read_text()), expected, name)
    with open(os.path.join(GOLDEN, "eval.csv")) as handle:
        assert (out / "eval.csv").read_text() == handle.read()
    strip = RasterImage.read_pgm(str(out / "strips" / "golden_000.pgm"))
    assert (strip.height, strip.width) == (32, 183)
    assert (strip.pixels == 128).all()


def test_default_run_needs_the_trained_scenes(tmp_path):
    out = tmp_path / "run"
    assert main(["synth", "--count", "2", "--out", str(out)]) == 0
    assert main(["pipeline", "--scenes", str(out / "scenes.json"), "--out", str(tmp_path / "untrained")]) == 0
    untrained = json.loads((tmp_path / "untrained" / "groups.json").read_text())
    assert all(entry["groups"] == [] for entry in untrained)

    assert main(["simulate", "--scenes", str(out / "scenes.json"), "--out", str(out)]) == 0
    trained_path = out / "scenes_trained.json"
    original, trained = load_scenes(str(out / "scenes.json")), load_scenes(str(trained_path))
    assert [s.id for s in trained] == [s.id for s in original]
    for before, after in zip(original, trained):
        assert [c.box for c in after.candidates] == [c.box for c in before.candidates]
        assert os.path.isfile(after.image)
        text = [c.score for c in after.candidates if c.provenance is not None]
        assert np.mean(text) > 0.5

    assert main(["pipeline", "--scenes", str(trained_path), "--out", str(out)]) == 0
    groups = json.loads((out / "groups.json").read_text())
    assert any(entry["groups"] for entry in groups)
    strips = json.loads((out / "strips.json").read_text())
    assert strips and all((out / doc["path"]).is_file() for doc in strips)


def test_groups_report_ungrouped_characters(tmp_path, scenes_dir):
    scenes = str(scenes_dir / "scenes.json")
    out = tmp_path / "g"
    assert main(["group", "--scenes", scenes, "--out", str(out)]) == 0
    floor = GroupingParams().score_floor
    for entry, scene in zip(json.loads((out / "groups.json").read_text()), load_scenes(scenes)):
        grouped = {i for g in entry["groups"] for i in g["char_ids"]}
        assert not grouped & set(entry["ungrouped"])
        eligible = {c.id for c in scene.candidates if c.score >= floor}
        assert grouped | set(entry["ungrouped"]) == eligible


def test_malformed_documents_exit_with_two(tmp_path, scenes_dir):
    scenes = str(scenes_dir / "scenes.json")
    bad = tmp_path / "bad.json"
    bad.write_text('[{"scene": "scene_0000",\n  "groups": [}')
    out = tmp_path / "never"
    assert main(["fitline", "--scenes", scenes, "--groups", str(bad), "--out", str(out)]) == 2
    assert main(["rectify", "--scenes", scenes, "--groups", str(bad), "--lines", str(bad), "--out", str(out)]) == 2
    assert main(["eval", "--scenes", scenes, "--detections", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    with pytest.raises(SceneParseError, match="line 2 column"):
        read_json(str(bad))
