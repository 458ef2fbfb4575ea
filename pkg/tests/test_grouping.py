import math

import numpy as np
import pytest

from charline.errors import NonAdjacentPairsError
from charline.geom import AABox, Point, centers_of, rotate_points
from charline.grouping import (
    GroupingParams,
    PairNode,
    build_pair_nodes,
    extract_groups,
    groups_from_doc,
    groups_to_doc,
    pairwise_cost,
    ungrouped_ids,
)
from charline.ingest import CharCandidate


def _node(left, right, direction):
    return PairNode(left_char_id=left, right_char_id=right, unary_cost=0.0,
                    midpoint=Point(0.0, 0.0), direction=direction)


def test_unary_cost_is_zero_at_unit_distance(make_char):
    # 3x4 boxes have diagonal 5, so centers 5 apart are one mean diagonal apart
    chars = [make_char(0, 10, 10, w=3, h=4, score=1.0), make_char(1, 15, 10, w=3, h=4, score=1.0)]
    nodes = build_pair_nodes(chars)
    assert len(nodes) == 1
    assert nodes[0].unary_cost == pytest.approx(0.0, abs=1e-12)
    assert nodes[0].char_ids == (0, 1)
    assert nodes[0].direction == pytest.approx((1.0, 0.0))
    assert nodes[0].midpoint == Point(12.5, 10.0)


def test_unary_cost_follows_alpha_and_beta(make_char):
    chars = [make_char(0, 10, 10, w=3, h=4, score=0.6), make_char(1, 20, 10, w=3, h=4, score=0.8)]
    node = build_pair_nodes(chars, GroupingParams(alpha=2.0, beta=0.5))[0]
    assert node.unary_cost == pytest.approx(-2.0 * 0.7 + 0.5 * 2.0)


def test_isolated_char_has_no_pairs(make_char):
    assert build_pair_nodes([make_char(0, 10, 10)]) == []
    assert build_pair_nodes([]) == []


def test_pair_nodes_match_brute_force_knn(rng, make_char):
    for _ in range(20):
        chars = []
        for i in range(8):
            line = i // 4
            cx = 20.0 + 14.0 * (i % 4) + rng.normal(0, 2)
            cy = 20.0 + 40.0 * line + rng.normal(0, 2)
            chars.append(make_char(i, cx, cy, w=rng.uniform(8, 12), h=rng.uniform(12, 16)))
        params = GroupingParams(k=3)
        got = {frozenset(n.char_ids) for n in build_pair_nodes(chars, params)}

        centers = centers_of([c.box for c in chars])
        diags = np.array([c.box.diagonal for c in chars])
        expected = set()
        for i in range(len(chars)):
            dist = sorted((float(np.hypot(*(centers[i] - centers[j]))) + abs(diags[i] - diags[j]), j)
                          for j in range(len(chars)) if j != i)
            expected.update(frozenset((i, j)) for _, j in dist[:3])
        assert got == expected


def test_pairwise_cost_cases():
    base = _node(0, 1, (1.0, 0.0))
    assert pairwise_cost(base, _node(1, 2, (1.0, 0.0))) == pytest.approx(0.0)
    assert pairwise_cost(base, _node(1, 2, (0.0, 1.0))) == pytest.approx(1.0)
    sixty = (math.cos(math.radians(60)), math.sin(math.radians(60)))
    assert pairwise_cost(base, _node(1, 2, sixty)) == pytest.approx(0.5)
    assert pairwise_cost(base, _node(1, 2, sixty), literal_cosine=True) == pytest.approx(0.5)
    assert pairwise_cost(base, _node(1, 2, (1.0, 0.0)), literal_cosine=True) == pytest.approx(1.0)


def test_pairwise_cost_needs_one_shared_char():
    with pytest.raises(NonAdjacentPairsError):
        pairwise_cost(_node(0, 1, (1.0, 0.0)), _node(2, 3, (1.0, 0.0)))
    with pytest.raises(NonAdjacentPairsError):
        pairwise_cost(_node(0, 1, (1.0, 0.0)), _node(0, 1, (1.0, 0.0)))


def test_collinear_chars_form_one_group(row_of_chars):
    chars = row_of_chars(5, score=0.95)
    groups = extract_groups(chars)
    assert len(groups) == 1
    assert groups[0].char_ids == (0, 1, 2, 3, 4)
    assert groups[0].total_cost < 0
    assert len(groups[0].pair_nodes) == 4
    assert ungrouped_ids(chars, groups) == []


def test_group_follows_spatial_order_not_ids(make_char):
    xs = [34, 10, 28, 16, 22]
    chars = [make_char(i, x, 20, w=8, h=10, score=0.95) for i, x in enumerate(xs)]
    groups = extract_groups(chars)
    assert len(groups) == 1
    order = groups[0].char_ids
    assert order in ((1, 3, 4, 2, 0), (0, 2, 4, 3, 1))


def test_vertical_line_is_grouped(make_char):
    chars = [make_char(i, 20, 10 + 12 * i, w=14, h=10, score=0.95) for i in range(6)]
    groups = extract_groups(chars)
    assert [set(g.char_ids) for g in groups] == [set(range(6))]


def test_scores_below_floor_give_no_groups(row_of_chars):
    chars = row_of_chars(5, score=0.3)
    assert extract_groups(chars) == []
    assert ungrouped_ids(chars, []) == []


def test_low_score_chars_are_left_out(row_of_chars, make_char):
    chars = row_of_chars(5, score=0.95) + [make_char(9, 70, 20, score=0.2)]
    groups = extract_groups(chars)
    assert 9 not in {i for g in groups for i in g.char_ids}


def test_two_far_rows_are_separate_groups(row_of_chars):
    top = row_of_chars(6, score=0.95)
    bottom = [CharCandidate(box=AABox(c.box.xmin, c.box.ymin + 80, c.box.xmax, c.box.ymax + 80),
                            score=c.score, id=c.id + 10) for c in top]
    groups = extract_groups(top + bottom)
    assert sorted(sorted(g.char_ids) for g in groups) == [list(range(6)), list(range(10, 16))]


def _assert_group_invariants(groups, chars):
    seen = set()
    by_id = {c.id: c for c in chars}
    for group in groups:
        assert group.total_cost < 0
        assert not seen & set(group.char_ids)
        seen.update(group.char_ids)
        for node, (a, b) in zip(group.pair_nodes, zip(group.char_ids, group.char_ids[1:])):
            assert node.char_ids == (a, b)
        assert all(by_id[i].score >= GroupingParams().score_floor for i in group.char_ids)


def _purity(groups, scene):
    line_of = {index: k for k, line in enumerate(scene.gt_lines) for index in line}
    by_id = scene.candidate_by_id()
    pure = 0
    for group in groups:
        lines = {line_of.get(by_id[i].provenance) for i in group.char_ids}
        pure += len(lines) == 1 and None not in lines
    return pure


def _crossing_purity(synthetic_scene, seeds):
    pure = total = 0
    for seed in seeds:
        scene = synthetic_scene(seed, layout="crossing", chars_per_line=(14, 18), distractors=0,
                                initial_scorer="oracle", feature_noise=0.3).scene
        groups = extract_groups(scene.candidates)
        _assert_group_invariants(groups, scene.candidates)
        pure += _purity(groups, scene)
        total += len(groups)
    assert total > 0
    return pure / total


def test_crossing_lines_are_not_mixed(synthetic_scene):
    assert _crossing_purity(synthetic_scene, range(20)) >= 0.95


@pytest.mark.slow
def test_crossing_lines_are_not_mixed_sweep(synthetic_scene):
    assert _crossing_purity(synthetic_scene, range(200)) >= 0.95


def _rotated(chars, angle_deg):
    centers = rotate_points(centers_of([c.box for c in chars]), math.radians(angle_deg), origin=(200.0, 200.0))
    out = []
    for c, (cx, cy) in zip(chars, centers):
        w, h = c.box.width, c.box.height
        box = AABox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
        out.append(CharCandidate(box=box, score=c.score, id=c.id))
    return out


def test_groups_are_rotation_invariant(synthetic_scene):
    for seed in range(20):
        chars = synthetic_scene(seed, initial_scorer="oracle").scene.candidates
        base = {frozenset(g.char_ids) for g in extract_groups(chars)}
        assert base
        rotated = {frozenset(g.char_ids) for g in extract_groups(_rotated(chars, 37.0))}
        assert rotated == base


def test_groups_are_deterministic(synthetic_scene):
    chars = synthetic_scene(3, initial_scorer="oracle").scene.candidates
    first = extract_groups(chars)
    assert extract_groups(chars) == first
    shuffled = {frozenset(g.char_ids) for g in extract_groups(list(reversed(chars)))}
    assert shuffled == {frozenset(g.char_ids) for g in first}


def test_group_doc_round_trip(row_of_chars):
    groups = extract_groups(row_of_chars(5, score=0.95))
    doc = groups_to_doc(groups)
    assert doc[0]["group_id"] == 0 and doc[0]["char_ids"] == [0, 1, 2, 3, 4]
    assert groups_from_doc(doc) == [(0, (0, 1, 2, 3, 4))]


def test_params_validation():
    with pytest.raises(ValueError):
        GroupingParams(alpha=0)
    with pytest.raises(ValueError):
        GroupingParams(entry_exit_cost=-0.1)
    with pytest.raises(ValueError):
        GroupingParams(k=0)
