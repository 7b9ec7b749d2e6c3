import json

import numpy as np
import pytest

from lanesmith.corpus import (
    CorpusConfig,
    empirical_count_distribution,
    generate_corpus,
    read_corpus,
    split_corpus,
    write_corpus,
)
from lanesmith.metrics.distributions import fraction_on_lane
from lanesmith.metrics.graph import build_lane_graph
from lanesmith.scene import scene_from_dict, scene_to_dict, validate
from lanesmith.scene.geometry import project_to_polyline, wrap_angle
from lanesmith.scene.io import dumps


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusConfig(seed=11, n_scenes=300))


def test_deterministic_bytes():
    cfg = CorpusConfig(seed=3, n_scenes=15)
    a = [dumps(s) for s in generate_corpus(cfg)]
    b = [dumps(s) for s in generate_corpus(cfg)]
    assert a == b
    c = [dumps(s) for s in generate_corpus(CorpusConfig(seed=4, n_scenes=15))]
    assert a != c


def test_scene_invariants_and_json_roundtrip(corpus):
    for s in corpus:
        validate(s)
        np.testing.assert_array_equal(s.adjacency.predecessor, s.successor.T)
        back = scene_from_dict(json.loads(json.dumps(scene_to_dict(s))))
        np.testing.assert_array_equal(back.lanes, s.lanes)
        np.testing.assert_array_equal(back.objects, s.objects)
        np.testing.assert_array_equal(back.successor, s.successor)
        np.testing.assert_array_equal(back.left, s.left)


def test_agents_on_lanes_and_aligned(corpus):
    assert fraction_on_lane(corpus, classes=range(5)) == 1.0
    for s in corpus:
        for obj in s.objects:
            heading = np.arctan2(obj[4], obj[3])
            ok = False
            for lane in s.lanes:
                dist, _, _, lane_heading = project_to_polyline(obj[:2], lane)
                if dist <= 1.5 and abs(np.degrees(wrap_angle(heading - lane_heading))) <= 20.0:
                    ok = True
                    break
            assert ok


def test_count_histogram_non_degenerate(corpus):
    assert len({s.n_objects for s in corpus}) >= 5
    assert len({s.n_lanes for s in corpus}) >= 5


def test_no_junction_keypoints_without_intersections():
    scenes = generate_corpus(CorpusConfig(seed=2, n_scenes=60, intersection_prob=0.0))
    for s in scenes:
        g = build_lane_graph(s)
        assert g.degree.max() <= 2


def test_count_distribution():
    cfg = CorpusConfig(seed=5, n_scenes=1)
    s = generate_corpus(cfg)[0]
    d = empirical_count_distribution([s])
    assert d.sample(np.random.default_rng(0)) == (s.n_objects, s.n_lanes)
    with pytest.raises(ValueError):
        empirical_count_distribution([])


def test_count_distribution_sampling_tv(corpus):
    d = empirical_count_distribution(corpus)
    assert abs(d.probs.sum() - 1.0) < 1e-12
    draws = d.sample(np.random.default_rng(0), 100_000)
    keys = {(int(a), int(b)): i for i, (a, b) in enumerate(zip(d.n_objects, d.n_lanes))}
    freq = np.zeros(len(d.probs))
    for a, b in draws:
        freq[keys[(int(a), int(b))]] += 1
    tv = 0.5 * np.abs(freq / len(draws) - d.probs).sum()
    assert tv < 0.02
    cond = d.objects_given_lanes(int(d.n_lanes[0]))
    assert abs(sum(cond.values()) - 1) < 1e-12


def test_split_and_manifest(tmp_path):
    cfg = CorpusConfig(seed=8, n_scenes=40)
    scenes = generate_corpus(cfg)
    train, test = split_corpus(scenes, cfg.seed)
    assert len(train) + len(test) == 40 and 0 < len(test) < 15
    write_corpus(tmp_path, scenes, cfg)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 8
    assert len(read_corpus(tmp_path, "test")) == len(test)


def test_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(intersection_prob=1.5)
    with pytest.raises(ValueError):
        CorpusConfig(agents=(5, 2))
