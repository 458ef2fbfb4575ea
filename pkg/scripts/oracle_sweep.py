import argparse
import json
import time

import numpy as np
from tqdm import tqdm

from charline.geom import centers_of
from charline.grouping import extract_groups
from charline.lineshape import LineKind, fit_piecewise, select_model, text_polygon
from charline.maskgen import (
    MaskScoreParams,
    build_char_graph,
    exhaustive_mask,
    greedy_partition,
    mask_score,
    maximum_spanning_tree,
    word_candidates,
)
from charline.rectify import rectify_strip
from charline.synthlab import SceneSpec, ScorerState, generate_scene, simulate_weak_training
from charline.utils import TQDM_FORMAT, build_logger

logger = build_logger("oracle_sweep")


def _progress(items, desc):
    return tqdm(items, ncols=120, desc=desc, bar_format=TQDM_FORMAT)


def _line_chain(scene, k=0):
    members = set(scene.gt_lines[k])
    return sorted((c for c in scene.candidates if c.provenance in members), key=lambda c: c.provenance)


def sweep_masks(n, params=MaskScoreParams()):
    """Greedy masks against the full set and the exhaustive optimum, words with <= 10 candidates."""
    checked = not_worse = optimal = 0
    seed = 0
    with _progress(range(n), "Masks") as progress:
        while checked < n:
            scene = generate_scene(SceneSpec(seed=seed, render=False, distractor_law="mixed")).scene
            seed += 1
            for word in scene.words:
                cands = word_candidates(scene, word, params.score_floor)
                if not 2 <= len(cands) <= 10 or checked >= n:
                    continue
                tree = maximum_spanning_tree(build_char_graph(cands, params.knn_k))
                greedy = greedy_partition(tree, cands, word, params)
                not_worse += greedy.s >= mask_score(cands, word, params).s - 1e-12
                optimal += abs(greedy.s - exhaustive_mask(cands, word, params).s) <= 1e-9
                checked += 1
                progress.update(1)
    return {"greedy_not_below_full_set": not_worse / n, "greedy_matches_exhaustive": optimal / n}


def sweep_grouping(n):
    pure = total = 0
    for seed in _progress(range(n), "Grouping"):
        scene = generate_scene(SceneSpec(seed=seed, layout="crossing", chars_per_line=(14, 18), distractors=0,
                                         initial_scorer="oracle", feature_noise=0.3, render=False)).scene
        line_of = {index: k for k, line in enumerate(scene.gt_lines) for index in line}
        by_id = scene.candidate_by_id()
        for group in extract_groups(scene.candidates):
            lines = {line_of.get(by_id[i].provenance) for i in group.char_ids}
            pure += len(lines) == 1 and None not in lines
            total += 1
    return {"crossing_purity": pure / max(total, 1)}


def sweep_selection(n):
    cases = {
        LineKind.ORDER0: {},
        LineKind.ORDER1: {"curve": "slanted"},
        LineKind.PIECEWISE: {"curve": "sine", "amplitude": 1.0, "wavelength": 40.0, "chars_per_line": (36, 40),
                             "words_per_line": (1, 1), "jitter": 0.0},
    }
    rates = {}
    for kind, spec in cases.items():
        hits = 0
        for seed in _progress(range(n), f"Selection {kind.value}"):
            scene = generate_scene(SceneSpec(seed=seed, n_lines=1, distractors=0, render=False, **spec)).scene
            hits += select_model(_line_chain(scene)).chosen.kind is kind
        rates[f"selects_{kind.value}"] = hits / n
    return rates


def sweep_rectify(n):
    near = total = 0
    for seed in _progress(range(n), "Rectify"):
        synth = generate_scene(SceneSpec(seed=seed, n_lines=1, curve="sine", amplitude=0.8, wavelength=60.0,
                                         jitter=0.0, chars_per_line=(36, 40), distractors=0))
        chain = _line_chain(synth.scene)
        model = fit_piecewise(chain)
        strip = rectify_strip(synth.image, text_polygon(chain, model), model, chars=chain)
        rows = strip.to_strip(centers_of([synth.scene.gt_chars[c.provenance] for c in chain]))[:, 1]
        near += int(np.sum(np.abs(rows - 0.5 * strip.height) <= 2.0))
        total += len(rows)
    return {"mid_row_within_2px": near / total}


def sweep_simulation(n, iters):
    traces = {}
    for seed in _progress(range(n), "Simulation"):
        scenes = [generate_scene(SceneSpec(seed=seed * 100 + k, render=False)).scene for k in range(4)]
        traces[seed] = simulate_weak_training(scenes, ScorerState.untrained(), iters=iters).f1_trace
    mean = np.mean(list(traces.values()), axis=0)
    return {"mean_f1_first": float(mean[0]), "mean_f1_last": float(mean[-1]),
            "traces": {str(k): [round(f, 6) for f in v] for k, v in traces.items()}}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--instances", type=int, default=200)
    parser.add_argument("--groups", type=int, default=100)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--iters", type=int, default=30)
    parser.add_argument("--output", type=str, default=None, help="Optional JSON file for the measured rates.")
    args = parser.parse_args()

    results = {}
    for name, run in (("masks", lambda: sweep_masks(args.instances)),
                      ("grouping", lambda: sweep_grouping(args.instances)),
                      ("selection", lambda: sweep_selection(args.groups)),
                      ("rectify", lambda: sweep_rectify(args.groups)),
                      ("simulation", lambda: sweep_simulation(args.seeds, args.iters))):
        start = time.time()
        results[name] = run()
        logger.info(f"{name}: {time.time() - start:.1f}s")

    for name, values in results.items():
        for key, value in values.items():
            if key != "traces":
                print(f"{name}.{key}: {value:.4f}")
    if args.output:
        with open(args.output, "w") as handle:
            json.dump(results, handle, indent=1)


if __name__ == "__main__":
    main()
