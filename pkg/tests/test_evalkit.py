import pandas as pd
import pytest

from charline.evalkit import (
    EvalRow,
    detections_from_doc,
    detections_to_doc,
    evaluate_chars,
    evaluate_words,
    evaluation_frame,
    mask_counts,
    match,
    prf,
    prf_from_counts,
    write_evaluation,
)
from charline.geom import AABox, iou
from charline.maskgen import generate_masks


def _boxes(n, size=10.0, pitch=20.0):
    return [AABox(pitch * i, 0.0, pitch * i + size, size) for i in range(n)]


def test_identical_predictions_all_match():
    gts = _boxes(4)
    result = match([(b, 0.5) for b in gts], gts)
    assert sorted(result.pairs) == [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert result.unmatched_preds == () and result.unmatched_gts == ()
    assert prf(result).f_measure == 1.0


def test_no_overlap_matches_nothing():
    result = match([(AABox(100, 100, 110, 110), 0.9)], _boxes(2))
    assert result.pairs == ()
    assert result.unmatched_preds == (0,)
    assert result.unmatched_gts == (0, 1)


def test_higher_score_claims_the_gt():
    gt = [AABox(0, 0, 10, 10)]
    preds = [(AABox(1, 0, 11, 10), 0.6), (AABox(0, 1, 10, 11), 0.9)]
    result = match(preds, gt)
    assert result.pairs == ((1, 0),)
    assert result.unmatched_preds == (0,)


def test_equal_scores_go_to_lower_index():
    gt = [AABox(0, 0, 10, 10)]
    preds = [(AABox(0, 1, 10, 11), 0.7), (AABox(1, 0, 11, 10), 0.7)]
    assert match(preds, gt).pairs == ((0, 0),)


def test_threshold_is_inclusive_and_validated():
    gt = [AABox(0, 0, 2, 2)]
    pred = [(AABox(1, 0, 3, 2), 1.0)]
    assert match(pred, gt, iou_threshold=1 / 3).pairs == ((0, 0),)
    assert match(pred, gt, iou_threshold=0.34).pairs == ()
    with pytest.raises(ValueError):
        match(pred, gt, iou_threshold=0.0)
    with pytest.raises(ValueError):
        match(pred, gt, iou_threshold=1.5)


def test_matching_is_one_to_one_and_permutation_invariant(rng):
    for _ in range(50):
        gts = []
        for _ in range(8):
            x, y = rng.uniform(0, 60, size=2)
            gts.append(AABox(x, y, x + 10, y + 10))
        preds = []
        for score in rng.permutation(12) / 12.0:
            x, y = rng.uniform(0, 60, size=2)
            preds.append((AABox(x, y, x + 10, y + 10), float(score)))
        result = match(preds, gts)
        assert len({i for i, _ in result.pairs}) == len(result.pairs)
        assert len({j for _, j in result.pairs}) == len(result.pairs)
        assert all(iou(preds[i][0], gts[j]) >= 0.5 for i, j in result.pairs)

        order = rng.permutation(len(preds))
        shuffled = [preds[i] for i in order]
        again = match(shuffled, gts)
        assert sorted((int(order[i]), j) for i, j in again.pairs) == sorted(result.pairs)


def test_prf_cases():
    scores = prf_from_counts(8, 10, 10)
    assert (scores.precision, scores.recall, scores.f_measure) == pytest.approx((0.8, 0.8, 0.8))
    assert prf_from_counts(0, 0, 10) == prf_from_counts(0, 0, 0)
    assert prf_from_counts(0, 0, 10).f_measure == 0.0


def test_prf_row_arithmetic():
    # precision 45.2%, recall 30.9%
    scores = prf_from_counts(452 * 309, 309 * 1000, 452 * 1000)
    assert scores.precision == pytest.approx(0.452)
    assert scores.recall == pytest.approx(0.309)
    assert scores.f_measure == pytest.approx(0.3671, abs=1e-4)


def test_f_measure_is_the_harmonic_mean(rng):
    for _ in range(500):
        n_gts = int(rng.integers(1, 100))
        n_preds = int(rng.integers(1, 100))
        matched = int(rng.integers(0, min(n_gts, n_preds) + 1))
        s = prf_from_counts(matched, n_preds, n_gts)
        assert s.f_measure * (s.precision + s.recall) == pytest.approx(2 * s.precision * s.recall, abs=1e-12)
        assert 0.0 <= s.f_measure <= 1.0


def test_evaluation_frame_has_aggregate_row(tmp_path):
    rows = [EvalRow("a", n_preds=10, n_gts=10, n_matched=8), EvalRow("b", n_preds=0, n_gts=5, n_matched=0)]
    frame = evaluation_frame(rows)
    assert list(frame["scene"]) == ["a", "b", "all"]
    total = frame.iloc[-1]
    assert (total["preds"], total["gts"], total["matched"]) == (10, 15, 8)
    assert total["precision"] == pytest.approx(0.8)
    assert total["recall"] == pytest.approx(8 / 15)
    assert frame.iloc[1]["f_measure"] == 0.0

    path = tmp_path / "eval.csv"
    write_evaluation(str(path), frame)
    text = path.read_text()
    assert text.splitlines()[0] == "scene,preds,gts,matched,precision,recall,f_measure"
    assert text.splitlines()[1] == "a,10,10,8,0.800000,0.800000,0.800000"
    assert pd.read_csv(path).shape == (3, 7)


def test_detections_doc_round_trip():
    dets = [(AABox(0, 0, 5, 5), 0.75, 0), (AABox(10, 0, 15, 5), 1.0, None)]
    doc = detections_to_doc("scene_0001", dets)
    parsed = detections_from_doc([doc])
    assert parsed == {"scene_0001": [(AABox(0, 0, 5, 5), 0.75), (AABox(10, 0, 15, 5), 1.0)]}


def test_evaluate_chars_on_clean_scene(synthetic_scene):
    scene = synthetic_scene(5, jitter=0.0, distractors=0, initial_scorer="oracle", feature_noise=0.1).scene
    row = evaluate_chars(scene)
    assert row.n_matched == row.n_gts == row.n_preds == len(scene.gt_chars)
    assert row.scene_id == "scene_0005"


def test_evaluate_words_with_annotation_boxes(synthetic_scene):
    scene = synthetic_scene(2).scene
    row = evaluate_words(scene, [(w.aabox, 1.0) for w in scene.words])
    assert row.n_matched == len(scene.words)
    assert evaluate_words(scene, []).n_matched == 0


def test_mask_counts_on_clean_scene(synthetic_scene):
    scene = synthetic_scene(7, jitter=0.0, distractors=0).scene
    tp, n_selected, n_true = mask_counts(scene, generate_masks(scene))
    assert tp == n_selected == n_true == len(scene.gt_chars)
