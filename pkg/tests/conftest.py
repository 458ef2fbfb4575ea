import numpy as np
import pytest

from charline.geom import AABox
from charline.ingest import CharCandidate
from charline.synthlab import SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def make_char():
    """Candidate factory: ``make_char(id, cx, cy, w, h, score=0.9)``."""
    def factory(cid, cx, cy, w=10.0, h=14.0, score=0.9, provenance=None):
        box = AABox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
        return CharCandidate(box=box, score=score, id=cid, provenance=provenance)
    return factory


@pytest.fixture
def row_of_chars(make_char):
    """Chars on a horizontal line, ids in reading order."""
    def factory(n, pitch=12.0, y=20.0, x0=10.0, **kwargs):
        return [make_char(i, x0 + i * pitch, y, **kwargs) for i in range(n)]
    return factory


@pytest.fixture
def clean_spec():
    return SceneSpec(seed=7, n_lines=2, jitter=0.0, distractors=0, render=False)


@pytest.fixture
def synthetic_scene():
    def factory(seed=0, **overrides):
        overrides.setdefault("render", False)
        return generate_scene(SceneSpec(seed=seed, **overrides), scene_id=f"scene_{seed:04d}")
    return factory


@pytest.fixture
def chain_of():
    """Ground-truth characters of one line as candidates, in chain order."""
    def pick(scene, line_index=0):
        members = set(scene.gt_lines[line_index])
        chars = [c for c in scene.candidates if c.provenance in members]
        return sorted(chars, key=lambda c: c.provenance)
    return pick
