from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import stats

import gradcheck
from trajreplay import nn
from trajreplay.batch import make_batch
from trajreplay.data import PredictionScene, SceneConfig, normalize_scene
from trajreplay.r2gan import (ConditionSampler, DiscriminatorConfig, DiscriminatorModel, GanCollapseWarning,
                              GanConfig, GeneratorConfig, GeneratorModel, GpPriorConfig, discriminate,
                              discriminate_batch, generate_batch, generate_scene, normalize_generated, rbf_kernel,
                              replay, sample_gp_prior, train_r2gan)
from trajreplay.synthetic import chain_task_scenes

TINY_GEN = GeneratorConfig(t_h=4, t_f=3, samples_per_vehicle=2, encoder=4, recurrent=5)
TINY_DIS = DiscriminatorConfig(t_h=4, t_f=3, encoder=4)
TINY_GP = GpPriorConfig(samples_per_vehicle=2, sequence_length=7, rbf_lengthscale=2.0)


@pytest.fixture(scope="module")
def chain_a():
    return [normalize_scene(s) for s in chain_task_scenes("A", 20, SceneConfig(), seed=0)]


# ---------------------------------------------------------------------------
# GP prior


def test_gp_shape_and_rows():
    cfg = GpPriorConfig(samples_per_vehicle=3, sequence_length=11)
    assert sample_gp_prior(cfg, 4).shape == (12, 11)


def test_infinite_lengthscale_gives_constant_paths():
    cfg = GpPriorConfig(rbf_lengthscale=1e6, rbf_variance=2.0)
    paths = sample_gp_prior(cfg, 50)
    assert (paths.max(1) - paths.min(1)).max() < 1e-3 * math.sqrt(2.0)


def test_lag_one_covariance_matches_kernel():
    cfg = GpPriorConfig(samples_per_vehicle=1, rng_seed=11)
    paths = sample_gp_prior(cfg, 10_000)
    k = rbf_kernel(cfg.sequence_length, cfg.rbf_lengthscale, cfg.rbf_variance)
    emp = np.mean([np.mean(paths[:, s] * paths[:, s + 1]) for s in range(cfg.sequence_length - 1)])
    assert abs(emp - k[0, 1]) / k[0, 1] < 0.05
    full = np.cov(paths.T)
    assert np.abs(full - k).max() < 0.05


def test_gp_is_seed_deterministic():
    cfg = GpPriorConfig(rng_seed=7)
    assert np.array_equal(sample_gp_prior(cfg, 3), sample_gp_prior(cfg, 3))
    assert not np.array_equal(sample_gp_prior(cfg, 3), sample_gp_prior(GpPriorConfig(rng_seed=8), 3))


def test_gp_config_validation():
    with pytest.raises(ValueError):
        GpPriorConfig(samples_per_vehicle=0)
    with pytest.raises(ValueError):
        GpPriorConfig(rbf_lengthscale=0.0)


# ---------------------------------------------------------------------------
# generator


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _sig(x):
    return 1 / (1 + np.exp(-x))


def _hand_generator(p: dict, noise: np.ndarray, labels, cfg: GeneratorConfig) -> np.ndarray:
    """Scalar-loop evaluation of the generator for a small scene."""
    n, m, t = len(labels), cfg.samples_per_vehicle, cfg.t

    def dense(x, w, b, act):
        out = [b[o] + sum(x[i] * w[i][o] for i in range(len(x))) for o in range(len(b))]
        return act(np.array(out))

    def mlp(x, name, layers, out_act):
        for k in range(layers):
            x = dense(x, p[f"{name}.{k}.weight"], p[f"{name}.{k}.bias"], _elu if k < layers - 1 else out_act)
        return x

    def gru(xs, name, h, reverse):
        w_ih, w_hh, b_ih, b_hh = (p[f"{name}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh"))
        hd = len(h)
        out = [None] * len(xs)
        for s in (range(len(xs) - 1, -1, -1) if reverse else range(len(xs))):
            gi = dense(xs[s], w_ih, b_ih, lambda v: v)
            gh = dense(h, w_hh, b_hh, lambda v: v)
            r = _sig(gi[:hd] + gh[:hd])
            z = _sig(gi[hd:2 * hd] + gh[hd:2 * hd])
            cand = np.tanh(gi[2 * hd:] + r * gh[2 * hd:])
            h = (1 - z) * cand + z * h
            out[s] = h
        return out

    codes = []
    for j in range(n):
        chunk = noise[m * j:m * (j + 1)]
        enc = [mlp(chunk[:, s], "noise_encoder", 1, _elu) for s in range(t)]
        onehot = np.zeros(9)
        onehot[labels[j] + 4] = 1.0
        hf = mlp(onehot, "cond_fwd", 2, np.tanh)
        hb = mlp(onehot, "cond_bwd", 2, np.tanh)
        ef = gru(enc, "bigru.fwd", hf, False)
        eb = gru(enc, "bigru.bwd", hb, True)
        codes.append([mlp((ef[s] + eb[s]) / 2, "seq_encoder", 1, _elu) for s in range(t)])
    out = np.zeros((n, t, 2))
    for j in range(n):
        for s in range(t):
            pairs = [mlp(codes[i][s] - codes[j][s], "pair_encoder", 1, _elu) for i in range(n) if i != j]
            pooled = sum(pairs) / len(pairs)
            h = mlp(np.concatenate([codes[j][s], pooled]), "head", 1, _elu)
            out[j, s] = dense(h, p["head_out.weight"], p["head_out.bias"], np.tanh)
    return out


def test_two_vehicle_generator_matches_hand_trace():
    gen = GeneratorModel(TINY_GEN)
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for t in gen.params.tensors():
            t.copy_(torch.from_numpy(rng.uniform(-0.3, 0.3, size=t.shape)))
    noise = sample_gp_prior(TINY_GP, 2, rng)
    labels = [0, -3]
    p = {k: v.detach().numpy() for k, v in gen.params.items()}
    np.testing.assert_allclose(generate_scene(gen, noise, labels), _hand_generator(p, noise, labels, TINY_GEN),
                               atol=1e-12, rtol=0)


def test_generator_needs_two_vehicles_and_matching_noise():
    gen = GeneratorModel(TINY_GEN)
    with pytest.raises(ValueError, match="two vehicles"):
        generate_scene(gen, sample_gp_prior(TINY_GP, 1), [0])
    with pytest.raises(nn.DimensionError):
        generate_scene(gen, sample_gp_prior(TINY_GP, 3), [0, 1])


@given(st.integers(0, 10_000), st.integers(3, 5))
def test_permuting_other_vehicles_leaves_each_output_unchanged(seed, n):
    rng = np.random.default_rng(seed)
    gen = GeneratorModel(TINY_GEN)
    m = TINY_GEN.samples_per_vehicle
    noise = sample_gp_prior(TINY_GP, n, rng)
    labels = rng.integers(-4, 5, size=n)
    perm = rng.permutation(n)
    out = generate_scene(gen, noise, labels)
    rows = np.concatenate([np.arange(m * j, m * (j + 1)) for j in perm])
    out_p = generate_scene(gen, noise[rows], labels[perm])
    assert np.array_equal(out_p, out[perm])


@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_generator_output_bounded(seed, gain):
    rng = np.random.default_rng(seed)
    gen = GeneratorModel(TINY_GEN)
    with torch.no_grad():
        for t in gen.params.tensors():
            t.mul_(gain)
    out = generate_scene(gen, rng.normal(scale=10, size=(2 * 3, 7)), [0, 1, -1])
    assert np.abs(out).max() <= 1.0


@pytest.mark.parametrize("seed", range(3))
def test_generator_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    gen = GeneratorModel(GeneratorConfig(t_h=2, t_f=2, samples_per_vehicle=2, encoder=3, recurrent=3, seed=seed))
    noise = torch.from_numpy(rng.normal(size=(2, 3, 2, 4)))
    labels = torch.from_numpy(rng.integers(-4, 5, size=(2, 3)))
    mask = torch.tensor([[True, True, True], [True, True, False]])
    assert gradcheck.check(lambda: (generate_batch(gen, noise, labels, mask) ** 2).sum(), gen.params) < 1e-4


def test_normalize_generated_centres_and_scales():
    full = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, size=(2, 3, 7, 2)))
    mask = torch.tensor([[True, True, True], [True, True, False]])
    out = normalize_generated(full, mask, 4).numpy()
    np.testing.assert_array_equal(out[:, 0, 3], 0.0)
    assert abs(np.abs(out[0]).max() - 1.0) < 1e-15 and abs(np.abs(out[1, :2]).max() - 1.0) < 1e-15
    assert np.all(out[1, 2] == 0)


# ---------------------------------------------------------------------------
# discriminator


def _tiny_scene(rng, n=4):
    full = rng.uniform(-1, 1, size=(n, 7, 2))
    return PredictionScene(full[0, :4], full[0, 4:], full[1:, :4], np.zeros(n, dtype=int), neighbor_full=full[1:])


@given(st.integers(0, 10_000))
def test_neighbour_shuffle_gives_identical_logit(seed):
    rng = np.random.default_rng(seed)
    dis = DiscriminatorModel(TINY_DIS)
    s = _tiny_scene(rng)
    perm = rng.permutation(3)
    shuffled = PredictionScene(s.target_history, s.target_future, s.neighbor_histories[perm], s.position_labels)
    assert discriminate(dis, s) == discriminate(dis, shuffled)


def test_zero_weight_discriminator_returns_head_bias(rng):
    dis = DiscriminatorModel(TINY_DIS)
    with torch.no_grad():
        for t in dis.params.tensors():
            t.zero_()
        dis.params["head.bias"].fill_(0.37)
    assert {discriminate(dis, _tiny_scene(rng)) for _ in range(5)} == {0.37}


def test_discriminator_needs_neighbours():
    s = PredictionScene(np.ones((4, 2)), np.ones((3, 2)), np.zeros((0, 4, 2)), [0])
    with pytest.raises(ValueError, match="neighbour"):
        discriminate(DiscriminatorModel(TINY_DIS), s)


@pytest.mark.parametrize("seed", range(3))
def test_discriminator_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dis = DiscriminatorModel(DiscriminatorConfig(t_h=4, t_f=3, encoder=3, seed=seed))
    batch = make_batch([_tiny_scene(rng, 3), _tiny_scene(rng, 2)])
    assert gradcheck.check(lambda: discriminate_batch(dis, batch.hist, batch.fut, batch.mask).sum(),
                           dis.params) < 1e-4


# ---------------------------------------------------------------------------
# training


def _small_models(seed=0):
    return (GeneratorModel(GeneratorConfig(encoder=16, recurrent=16, seed=seed)),
            DiscriminatorModel(DiscriminatorConfig(encoder=16, seed=seed)))


def test_ten_training_steps_are_reproducible(chain_a):
    logs = []
    for _ in range(2):
        g, d = _small_models()
        _, _, log = train_r2gan(chain_a, g, d, GanConfig(epochs=5, batch_size=16, max_steps=10,
                                                         diagnostic_samples=20))
        logs.append((log.d_loss, log.g_loss, g.params.flat()))
    assert len(logs[0][0]) == 10
    assert logs[0][0] == logs[1][0] and logs[0][1] == logs[1][1]
    assert np.array_equal(logs[0][2], logs[1][2])


def test_collapse_triggers_warning_and_stop(chain_a):
    g, d = _small_models()
    cfg = GanConfig(epochs=3, batch_size=16, collapse_threshold=1e9, collapse_patience=3, diagnostic_samples=10)
    with pytest.warns(GanCollapseWarning):
        _, _, log = train_r2gan(chain_a, g, d, cfg)
    assert log.collapsed and len(log.d_loss) == 3 and log.warnings


def test_discriminator_separates_untrained_generator(chain_a):
    g, d = _small_models()
    cfg = GanConfig(epochs=15, batch_size=16, g_steps=0, learning_rate=1e-3, diagnostic_samples=10)
    before = g.params.flat()
    train_r2gan(chain_a, g, d, cfg)
    assert np.array_equal(g.params.flat(), before)
    fakes = replay(g, len(chain_a), ConditionSampler.from_scenes(chain_a), GpPriorConfig(), seed=3)
    correct = sum(discriminate(d, s) > 0 for s in chain_a) + sum(discriminate(d, s) < 0 for s in fakes)
    assert correct / (2 * len(chain_a)) > 0.9


def _short_run(chain_a, **kw):
    g, d = _small_models()
    init = g.params.flat()
    train_r2gan(chain_a, g, d, GanConfig(batch_size=16, max_steps=2, diagnostic_samples=10, **kw))
    return init, g.params.flat()


def test_generator_weight_average(chain_a):
    init, plain = _short_run(chain_a)
    _, last = _short_run(chain_a, ema_decay=0.0)
    assert np.array_equal(last, plain)
    # two steps: ema = d^2 init + d (1 - d) after_step_1 + (1 - d) after_step_2
    g, d = _small_models()
    train_r2gan(chain_a, g, d, GanConfig(batch_size=16, max_steps=1, diagnostic_samples=10))
    first = g.params.flat()
    decay = 0.7
    _, averaged = _short_run(chain_a, ema_decay=decay)
    expected = decay ** 2 * init + decay * (1 - decay) * first + (1 - decay) * plain
    np.testing.assert_allclose(averaged, expected, rtol=0, atol=1e-15)


def test_gan_config_validation():
    with pytest.raises(ValueError):
        GanConfig(d_steps=0)
    with pytest.raises(ValueError):
        GanConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        GanConfig(ema_decay=1.0)
    with pytest.raises(ValueError):
        GanConfig(final_lr_fraction=0.0)


# ---------------------------------------------------------------------------
# replay


def test_replay_of_zero_scenes_is_empty():
    assert replay(GeneratorModel(TINY_GEN), 0, ConditionSampler([[0, 1]]), TINY_GP) == []


def test_replayed_scenes_are_valid_and_tagged():
    gen = GeneratorModel(TINY_GEN)
    scenes = replay(gen, 20, ConditionSampler([[0, 1], [0, -1, 3]]), TINY_GP, seed=2)
    for i, s in enumerate(scenes):
        s.validate()
        assert s.t_h == 4 and s.t_f == 3 and s.neighbor_full is not None
        assert s.meta == {"synthetic": True, "generator": gen.provenance_id, "replay_index": i}
        assert np.all(s.target_history[-1] == 0) and abs(max(np.abs(b).max() for b in s.coordinate_blocks()) - 1) < 1e-12


def test_replay_independent_of_batch_size():
    gen = GeneratorModel(TINY_GEN)
    sampler = ConditionSampler([[0, 1], [0, -1, 3]])
    a = replay(gen, 30, sampler, TINY_GP, seed=4, batch_size=7)
    b = replay(gen, 30, sampler, TINY_GP, seed=4, batch_size=256)
    for x, y in zip(a, b):
        assert x.position_labels.tolist() == y.position_labels.tolist()
        np.testing.assert_allclose(x.target_future, y.target_future, atol=1e-12, rtol=0)


def test_replayed_label_histogram_matches_sampler():
    sampler = ConditionSampler([[0, 1]] * 5 + [[0, -3]] * 3 + [[0, 1, 4]] * 2)
    scenes = replay(GeneratorModel(TINY_GEN), 10_000, sampler, TINY_GP, seed=0, batch_size=2048)
    probs = sampler.probabilities()
    counts = {k: 0 for k in probs}
    for s in scenes:
        counts[tuple(s.position_labels.tolist())] += 1
    keys = sorted(probs)
    observed = np.array([counts[k] for k in keys])
    expected = np.array([probs[k] for k in keys]) * len(scenes)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_sampler_from_distribution_validates():
    with pytest.raises(ValueError):
        ConditionSampler.from_distribution([(0, 1)], [0.5])
    s = ConditionSampler.from_distribution([(0, 1), (0, 2)], [0.25, 0.75])
    assert s.probabilities() == {(0, 1): 0.25, (0, 2): 0.75}
