from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_scene
from trajreplay.data import (Corpus, CorpusParseError, CorpusValidationError, DegenerateSceneError,
                             PredictionScene, SceneConfig, TrajectoryRecord, UnsupportedRateError, ConfigError,
                             denormalize_scene, extract_scenes, load_corpus, normalize_scene, read_scene_archive,
                             resample, split_scenes, write_corpus, write_scene_archive)
from trajreplay.synthetic import parallel_pair, random_corpus


def _write(tmp_path, text):
    p = tmp_path / "c.csv"
    p.write_text(text)
    return p


def test_minimal_corpus_has_two_groups(tmp_path):
    p = _write(tmp_path, "vehicle_id,frame,x,y\n1,0,0,0\n1,1,1,0\n2,0,0,3\n2,1,1,3\n")
    c = load_corpus(p, rate_hz=5)
    assert len(c) == 4
    assert c.vehicle_ids == [1, 2]
    assert c.rate_hz == 5


def test_rate_comment_is_recorded(tmp_path):
    p = _write(tmp_path, "# rate_hz=25\nvehicle_id,frame,x,y\n1,0,0,0\n")
    assert load_corpus(p).rate_hz == 25


def test_duplicate_frame_names_vehicle(tmp_path):
    p = _write(tmp_path, "vehicle_id,frame,x,y\n7,0,0,0\n7,0,1,0\n")
    with pytest.raises(CorpusValidationError, match="vehicle 7"):
        load_corpus(p)


def test_malformed_row_reports_line(tmp_path):
    p = _write(tmp_path, "vehicle_id,frame,x,y\n1,0,0,0\n1,1,abc,0\n")
    with pytest.raises(CorpusParseError, match=r"c\.csv:3:"):
        load_corpus(p)


def test_synthetic_corpus_record_count(tmp_path):
    c = random_corpus(50, 200, 10.0, seed=0)
    p = tmp_path / "r.csv"
    write_corpus(p, c, rate_hz=10)
    back = load_corpus(p)
    assert len(back) == 10_000
    assert back.rate_hz == 10


def test_resample_halves():
    recs = [TrajectoryRecord(1, f, float(f), 0.0) for f in range(10)]
    out = resample(recs, 10, 5)
    assert [r.frame for r in out] == [0, 1, 2, 3, 4]
    assert [r.x for r in out] == [0.0, 2.0, 4.0, 6.0, 8.0]


def test_resample_25_to_5():
    recs = [TrajectoryRecord(1, f, float(f), 0.0) for f in range(25)]
    assert len(resample(recs, 25, 5)) == 5


def test_resample_non_integer_ratio():
    with pytest.raises(UnsupportedRateError):
        resample([TrajectoryRecord(1, 0, 0.0, 0.0)], 10, 4)


@given(st.integers(1, 5), st.integers(0, 30))
def test_resample_idempotent(k, n):
    recs = [TrajectoryRecord(v, f, float(f), float(v)) for v in range(2) for f in range(n)]
    once = resample(recs, 5 * k, 5)
    assert list(resample(once, 5, 5)) == list(once)


def test_single_vehicle_gives_no_scenes():
    recs = [TrajectoryRecord(1, f, float(f), 0.0) for f in range(41)]
    assert extract_scenes(recs, SceneConfig()) == []


def test_parallel_pair_gives_two_scenes_of_41_steps():
    scenes = extract_scenes(parallel_pair(41, 5.0), SceneConfig())
    assert len(scenes) == 2
    assert sorted(s.meta["target_id"] for s in scenes) == [0, 1]
    for s in scenes:
        assert len(s.target_history) + len(s.target_future) == 41
        assert s.neighbor_full.shape == (1, 41, 2)


def test_extract_is_deterministic():
    c = resample(random_corpus(8, 100, 10.0, seed=3), 10, 5)
    a = extract_scenes(c, SceneConfig())
    b = extract_scenes(c, SceneConfig())
    assert len(a) == len(b) > 0
    assert all(np.array_equal(x.target_future, y.target_future) for x, y in zip(a, b))


def test_neighbour_cap_and_tie_break():
    cfg = SceneConfig(n_v=2, eig_k=2)
    # vehicles 2 and 3 are equally close to vehicle 1; the smaller id wins
    recs = []
    for vid, y in ((1, 0.0), (2, 3.5), (3, -3.5)):
        recs += [TrajectoryRecord(vid, f, float(f), y) for f in range(41)]
    scenes = [s for s in extract_scenes(recs, cfg) if s.meta["target_id"] == 1]
    assert scenes[0].meta["neighbor_ids"] == [2]


def test_vehicle_count_filter():
    recs = []
    for vid in range(4):
        recs += [TrajectoryRecord(vid, f, float(f), 3.5 * vid) for f in range(41)]
    assert extract_scenes(recs, SceneConfig(min_vehicles=5)) == []
    assert len(extract_scenes(recs, SceneConfig(max_vehicles=4))) == 4


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(t_h=1)
    with pytest.raises(ConfigError):
        SceneConfig(eig_k=6, n_v=5)
    with pytest.raises(ConfigError):
        SceneConfig(decay_lambda=0.0)


def test_normalize_fixed_point():
    s = PredictionScene(np.array([[-1.0, 0.0], [0.0, 0.0]]), np.array([[0.5, 0.5]]),
                        np.array([[[0.0, -1.0], [0.2, 0.1]]]), [0, 1])
    n = normalize_scene(s)
    assert np.array_equal(n.target_history, s.target_history)
    assert np.array_equal(n.neighbor_histories, s.neighbor_histories)
    assert n.scale == 1.0


def test_normalize_centres_target():
    s = PredictionScene(np.array([[90.0, 50.0], [100.0, 50.0]]), np.array([[110.0, 50.0]]),
                        np.array([[[95.0, 53.5], [105.0, 53.5]]]), [0, -1])
    n = normalize_scene(s)
    assert np.array_equal(n.target_history[-1], [0.0, 0.0])
    np.testing.assert_allclose(n.offset, [100.0, 50.0])


def test_normalize_degenerate():
    s = PredictionScene(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros((1, 2, 2)), [0, 0])
    with pytest.raises(DegenerateSceneError):
        normalize_scene(s)


@given(st.integers(0, 10_000), st.integers(2, 5), st.booleans())
def test_normalize_round_trip_and_unit_norm(seed, n, full):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, n, full=full)
    s.target_history += rng.uniform(-1e3, 1e3, size=2)
    n_s = normalize_scene(s)
    top = max(float(np.abs(b).max()) for b in n_s.coordinate_blocks())
    assert abs(top - 1.0) <= 1e-12
    back = denormalize_scene(n_s)
    for a, b in zip(back.coordinate_blocks(), s.coordinate_blocks()):
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


def test_round_trip_on_100_random_scenes(rng):
    for _ in range(100):
        s = random_scene(rng, int(rng.integers(2, 6)))
        back = denormalize_scene(normalize_scene(s))
        for a, b in zip(back.coordinate_blocks(), s.coordinate_blocks()):
            assert np.abs(a - b).max() < 1e-9


def test_archive_round_trip_is_bit_stable(tmp_path, rng):
    cfg = SceneConfig()
    scenes = [normalize_scene(random_scene(rng, 3)) for _ in range(5)]
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_scene_archive(p1, scenes, cfg)
    header, back = read_scene_archive(p1)
    assert header["count"] == 5 and header["scene_config"] == cfg.to_dict()
    write_scene_archive(p2, back, cfg)
    assert p1.read_bytes() == p2.read_bytes()
    for a, b in zip(scenes, back):
        assert np.array_equal(a.target_future, b.target_future)
        assert a.scale == b.scale


def test_split_is_a_partition(rng):
    scenes = [random_scene(rng, 2) for _ in range(20)]
    parts = split_scenes(scenes, seed=1)
    assert [len(p) for p in parts] == [14, 2, 4]
    ids = {id(s) for p in parts for s in p}
    assert len(ids) == 20


def test_corpus_is_a_list():
    c = Corpus([TrajectoryRecord(2, 0, 0.0, 0.0)], rate_hz=5)
    assert isinstance(c, list) and c.vehicle_ids == [2]
