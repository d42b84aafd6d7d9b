from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import gradcheck
from conftest import random_scene
from trajreplay.batch import make_batch
from trajreplay.data import PredictionScene, SceneConfig, normalize_scene
from trajreplay.predictor import (EvalReport, PredictorConfig, PredictorModel, curves_to_csv, evaluate_rmse,
                                  forward_internal, history_scale, normalized_rmse, predict, predict_many,
                                  reports_to_csv, rmse_per_step, train_predictor, _internal_loss)
from trajreplay.synthetic import chain_task_scenes, shifted_scenes

SMALL = PredictorConfig(encoder=8, hidden=16)


def _normalized(rng, n=3, **kw):
    return normalize_scene(random_scene(rng, n, **kw))


def _permute_neighbors(s: PredictionScene, perm) -> PredictionScene:
    labels = np.concatenate([s.position_labels[:1], s.position_labels[1:][perm]])
    full = None if s.neighbor_full is None else s.neighbor_full[perm]
    return PredictionScene(s.target_history, s.target_future, s.neighbor_histories[perm], labels, full,
                           s.offset, s.scale)


# ---------------------------------------------------------------------------
# forward pass


@given(st.integers(0, 10_000), st.integers(3, 5))
def test_neighbour_permutation_gives_identical_prediction(seed, n):
    rng = np.random.default_rng(seed)
    s = _normalized(rng, n)
    model = PredictorModel(SMALL)
    perm = rng.permutation(n - 1)
    assert np.array_equal(predict(model, s), predict(model, _permute_neighbors(s, perm)))


def test_zero_weights_give_scene_independent_output(rng):
    model = PredictorModel(SMALL)
    for name in model.params.names():
        if not name.endswith("bias") and not name.endswith("b_ih") and not name.endswith("b_hh"):
            with torch.no_grad():
                model.params[name].zero_()
    outs = []
    for n in (2, 3, 4):
        batch = make_batch([_normalized(rng, n)])
        internal = batch.hist / history_scale(batch)[:, None, None, None]
        with torch.no_grad():
            outs.append(forward_internal(model, internal, batch.mask)[0].numpy())
    # the target's last position is the origin in a centred scene, so only the biases remain
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])
    head_bias = model.params["head.0.bias"].detach().numpy()
    np.testing.assert_allclose(outs[0], np.arange(1, SMALL.t_f + 1)[:, None] * head_bias, atol=1e-15)


def test_scene_without_neighbours_is_rejected():
    cfg = SceneConfig()
    s = PredictionScene(np.ones((cfg.t_h, 2)), np.ones((cfg.t_f, 2)), np.zeros((0, cfg.t_h, 2)), [0])
    with pytest.raises(ValueError, match="neighbour"):
        predict(PredictorModel(SMALL), s)


@pytest.mark.parametrize("seed", range(3))
def test_predictor_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = PredictorConfig(t_h=4, t_f=3, encoder=3, hidden=4, seed=seed)
    model = PredictorModel(cfg)
    sc = SceneConfig(t_h=4, t_f=3)
    batch = make_batch([_normalized(rng, 3, cfg=sc), _normalized(rng, 2, cfg=sc)])
    assert gradcheck.check(lambda: _internal_loss(model, batch), model.params) < 1e-4


# ---------------------------------------------------------------------------
# training


def test_constant_velocity_extrapolation():
    cfg = SceneConfig()
    train = [normalize_scene(s) for s in shifted_scenes(300, (0.0, 0.0), 0.02, cfg, seed=0)]
    test = [normalize_scene(s) for s in shifted_scenes(50, (0.0, 0.0), 0.02, cfg, seed=1)]
    model = train_predictor(train, PredictorConfig(epochs=30))
    pred = predict_many(model, test)
    fut = np.stack([s.target_future for s in test])
    end_err = np.sqrt(((pred[:, -1] - fut[:, -1]) ** 2).sum(-1)).mean()
    assert end_err < 0.5, end_err


def test_single_scene_memorised(rng):
    s = _normalized(rng, 3)
    model = train_predictor([s], PredictorConfig(encoder=16, hidden=32, epochs=300, learning_rate=1e-2))
    assert normalized_rmse(model, [s]) < 1e-2
    assert all("val_rmse" not in h for h in model.history)


def test_two_clusters_beat_wrong_cluster_baseline():
    cfg = SceneConfig()
    a = [normalize_scene(s) for s in chain_task_scenes("A", 60, cfg, seed=0)]
    b = [normalize_scene(s) for s in chain_task_scenes("B", 60, cfg, seed=0)]
    a_test = [normalize_scene(s) for s in chain_task_scenes("A", 15, cfg, seed=7)]
    b_test = [normalize_scene(s) for s in chain_task_scenes("B", 15, cfg, seed=7)]
    model = train_predictor(a + b, PredictorConfig(epochs=40))

    def metres(scenes):
        return np.stack([s.target_future * s.scale for s in scenes])

    mean_a, mean_b = metres(a).mean(0), metres(b).mean(0)
    for test, wrong in ((a_test, mean_b), (b_test, mean_a)):
        truth = metres(test)
        baseline = rmse_per_step(np.broadcast_to(wrong, truth.shape).copy(), truth).mean()
        assert evaluate_rmse(model, test).mean_rmse < baseline


def test_training_logs_validation_and_is_deterministic(rng):
    scenes = [_normalized(rng, 3) for _ in range(20)]
    cfg = PredictorConfig(encoder=8, hidden=16, epochs=3)
    m1, m2 = train_predictor(scenes, cfg), train_predictor(scenes, cfg)
    assert [h["epoch"] for h in m1.history] == [0, 1, 2]
    assert all(math.isfinite(h["val_rmse"]) for h in m1.history)
    assert np.array_equal(m1.params.flat(), m2.params.flat())


def test_fine_tuning_starts_from_init(rng):
    scenes = [_normalized(rng, 3) for _ in range(5)]
    base = train_predictor(scenes, PredictorConfig(encoder=8, hidden=16, epochs=2))
    zero = train_predictor(scenes, PredictorConfig(encoder=8, hidden=16, epochs=0), init=base)
    assert np.array_equal(zero.params.flat(), base.params.flat())
    assert zero.params is not base.params


# ---------------------------------------------------------------------------
# evaluation


def test_perfect_prediction_gives_zero():
    x = np.random.default_rng(0).normal(size=(4, 25, 2))
    assert np.all(rmse_per_step(x, x) == 0)


def test_uniform_one_metre_offset():
    x = np.random.default_rng(0).normal(size=(7, 25, 2))
    angle = np.random.default_rng(1).uniform(0, 2 * np.pi, size=(7, 25))
    off = np.stack([np.cos(angle), np.sin(angle)], -1)
    np.testing.assert_allclose(rmse_per_step(x + off, x), 1.0, atol=1e-15)


def test_rmse_against_hand_computation():
    rng = np.random.default_rng(3)
    pred, true = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2))
    expected = []
    for t in range(5):
        total = 0.0
        for b in range(3):
            dx = pred[b, t, 0] - true[b, t, 0]
            dy = pred[b, t, 1] - true[b, t, 1]
            total += dx * dx + dy * dy
        expected.append(math.sqrt(total / 3))
    np.testing.assert_allclose(rmse_per_step(pred, true), expected, atol=1e-12, rtol=0)


def test_empty_scene_set_rejected():
    with pytest.raises(ValueError):
        evaluate_rmse(PredictorModel(SMALL), [])
    with pytest.raises(ValueError):
        rmse_per_step(np.zeros((0, 3, 2)), np.zeros((0, 3, 2)))


def test_evaluation_is_order_invariant(rng):
    scenes = [_normalized(rng, int(rng.integers(2, 5))) for _ in range(12)]
    model = PredictorModel(SMALL)
    a = evaluate_rmse(model, scenes).rmse_per_step
    b = evaluate_rmse(model, scenes[::-1]).rmse_per_step
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_metre_rmse_invariant_to_normalisation_scale(rng):
    scenes = [_normalized(rng, 3) for _ in range(6)]
    rescaled = []
    for k, s in enumerate(scenes):
        f = 0.5 + k
        r = s.with_transform(lambda a: a / f)
        r.offset, r.scale = s.offset, s.scale * f
        rescaled.append(r)
    model = PredictorModel(SMALL)
    np.testing.assert_allclose(evaluate_rmse(model, scenes).rmse_per_step,
                               evaluate_rmse(model, rescaled).rmse_per_step, rtol=1e-9)


def test_horizon_rows_and_exports():
    rep = EvalReport([float(i) for i in range(1, 26)], 0.2, 10, "A", "m")
    assert rep.horizon_rmse() == {1.0: 5.0, 2.0: 10.0, 3.0: 15.0, 4.0: 20.0, 5.0: 25.0}
    lines = reports_to_csv({"A": rep, "B": rep}).splitlines()
    assert lines[0] == "horizon_s,A,B" and lines[1] == "1,5.000000,5.000000" and len(lines) == 6
    assert curves_to_csv({"A": rep}).splitlines()[1] == "0.2,1.000000"
    assert json.loads(json.dumps(rep.to_json()))["horizon_rmse"]["5"] == 25.0
