"""Built-in synthetic corpora.

These stand in for the real highway corpora in tests and experiments.

``chainA``  constant-velocity lane keeping: groups of three vehicles on a
            three-lane road (3.5 m lanes), speeds 20-30 m/s, lateral
            Ornstein-Uhlenbeck wobble (0.15 m stationary std) around the lane
            centre, small longitudinal acceleration noise.
``chainB``  sinusoidal lane changes: same layout but vehicles start in the
            right or centre lane, speeds 8-14 m/s, and every vehicle moves
            one lane (3.5 m) to the left with the half-cosine profile
            ``3.5 (1 - cos(pi (t - t0) / T)) / 2`` for ``t0 <= t <= t0 + T``.
            The change starts 0.5-1.5 s before the end of the first
            ``history_seconds`` (default 3 s) and lasts T in [4, 6] s, so it
            is already visible in a prediction history.
``shift``   scene-level corpus for divergence checks; future = constant
            velocity extrapolation + shift + isotropic Gaussian noise, so the
            conditional KL between two shifts is known in closed form.

Every group occupies its own frame range so vehicles of different groups are
never present at the same time.
"""
from __future__ import annotations

import numpy as np

from .data import (Corpus, PredictionScene, SceneConfig, TrajectoryRecord, extract_scenes,
                   position_labels, resample)

LANE_WIDTH = 3.5


def random_corpus(n_vehicles: int = 50, n_frames: int = 200, rate_hz: float = 10.0, seed: int = 0) -> Corpus:
    """Free-flowing three-lane traffic, every vehicle present in every frame."""
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    t = np.arange(n_frames) * dt
    recs = []
    for vid in range(n_vehicles):
        lane = rng.integers(-1, 2)
        x0 = rng.uniform(0, 40.0 * n_vehicles)
        v = rng.uniform(15, 30)
        xs = x0 + v * t
        ys = lane * LANE_WIDTH + 0.1 * np.sin(t * rng.uniform(0.2, 1.0) + rng.uniform(0, 6.28))
        recs.extend(TrajectoryRecord(vid, f, float(x), float(y)) for f, (x, y) in enumerate(zip(xs, ys)))
    return Corpus(recs, rate_hz=rate_hz, source=f"random:{seed}")


def parallel_pair(n_frames: int = 41, rate_hz: float = 5.0, speed: float = 25.0) -> Corpus:
    """Two vehicles side by side in adjacent lanes at equal speed."""
    dt = 1.0 / rate_hz
    recs = []
    for vid, y in ((0, 0.0), (1, LANE_WIDTH)):
        recs.extend(TrajectoryRecord(vid, f, speed * f * dt, y) for f in range(n_frames))
    return Corpus(recs, rate_hz=rate_hz, source="parallel")


def _ou(rng, n, dt, tau, std):
    out = np.empty(n)
    a = np.exp(-dt / tau)
    out[0] = rng.normal(0, std)
    noise = rng.normal(0, std * np.sqrt(1 - a * a), size=n)
    for i in range(1, n):
        out[i] = a * out[i - 1] + noise[i]
    return out


def lane_change_offset(t: np.ndarray, t0: float, duration: float, width: float = LANE_WIDTH) -> np.ndarray:
    """Half-cosine lateral profile from 0 to ``width`` over [t0, t0 + duration]."""
    u = np.clip((t - t0) / duration, 0.0, 1.0)
    return width * 0.5 * (1.0 - np.cos(np.pi * u))


def chain_task_records(kind: str, n_groups: int, seconds: float = 8.0, rate_hz: float = 10.0,
                       seed: int = 0, vehicles_per_group: int = 3, history_seconds: float = 3.0) -> Corpus:
    if kind not in ("A", "B"):
        raise ValueError(f"unknown chain task {kind!r}")
    rng = np.random.default_rng([seed, ord(kind)])
    dt = 1.0 / rate_hz
    n_frames = int(round(seconds * rate_hz)) + 1
    t = np.arange(n_frames) * dt
    recs = []
    vid = 0
    # block length divisible by any plausible decimation factor
    block = 100 * int(np.ceil((n_frames + 10) / 100))
    for g in range(n_groups):
        f0 = g * block
        if kind == "A":
            lanes = [0] + list(rng.integers(-1, 2, size=vehicles_per_group - 1))
        else:
            # leave room for the change to the left
            lanes = list(rng.integers(-1, 1, size=vehicles_per_group))
        offsets = [0.0]
        while len(offsets) < vehicles_per_group:
            cand = rng.uniform(-30.0, 30.0)
            lane = lanes[len(offsets)]
            if all(abs(cand - o) > 10.0 for o, l in zip(offsets, lanes) if l == lane):
                offsets.append(cand)
        if kind == "A":
            base_v = rng.uniform(20.0, 30.0)
        else:
            base_v = rng.uniform(8.0, 14.0)
        for j in range(vehicles_per_group):
            v = base_v + rng.uniform(-1.0, 1.0)
            acc = rng.normal(0.0, 0.15)
            xs = offsets[j] + v * t + 0.5 * acc * t ** 2
            if kind == "A":
                ys = lanes[j] * LANE_WIDTH + _ou(rng, n_frames, dt, tau=2.0, std=0.15)
            else:
                t0 = history_seconds - rng.uniform(0.5, 1.5)
                ys = lanes[j] * LANE_WIDTH + lane_change_offset(t, t0, rng.uniform(4.0, 6.0))
            recs.extend(TrajectoryRecord(vid, f0 + f, float(x), float(y))
                        for f, (x, y) in enumerate(zip(xs, ys)))
            vid += 1
    return Corpus(recs, rate_hz=rate_hz, source=f"chain{kind}:{seed}")


def chain_task_scenes(kind: str, n_groups: int, cfg: SceneConfig | None = None, seed: int = 0,
                      source_hz: float = 10.0) -> list[PredictionScene]:
    """Scenes of one synthetic chain task, recorded at ``source_hz`` and resampled to the grid."""
    cfg = cfg or SceneConfig()
    seconds = cfg.t * cfg.step_seconds - cfg.step_seconds
    recs = chain_task_records(kind, n_groups, seconds=seconds, rate_hz=source_hz, seed=seed)
    recs = resample(recs, source_hz, cfg.rate_hz)
    return extract_scenes(recs, cfg, source=f"chain{kind}")


def shifted_scenes(n: int, shift, sigma: float, cfg: SceneConfig, seed: int = 0) -> list[PredictionScene]:
    """Two-vehicle scenes whose target future is a linear function of the
    history plus ``shift`` plus N(0, sigma^2 I) noise.

    ``shift`` is a per-step (dx, dy) added to every future step, so the
    flattened future offset has squared norm ``t_f * |shift|^2``.
    """
    rng = np.random.default_rng(seed)
    shift = np.asarray(shift, dtype=np.float64).reshape(2)
    dt = cfg.step_seconds
    hist_steps = np.arange(-cfg.t_h + 1, 1) * dt
    fut_steps = np.arange(1, cfg.t_f + 1) * dt
    scenes = []
    for _ in range(n):
        v = rng.uniform(10.0, 30.0)
        u = rng.uniform(-1.0, 1.0)
        hist = np.stack([v * hist_steps, u * hist_steps], axis=1)
        fut = np.stack([v * fut_steps, u * fut_steps], axis=1) + shift + sigma * rng.standard_normal((cfg.t_f, 2))
        side = rng.choice([-1.0, 1.0])
        dx = rng.uniform(-20.0, 20.0)
        nb_v = v + rng.uniform(-2.0, 2.0)
        nb_full = np.stack([dx + nb_v * np.concatenate([hist_steps, fut_steps]),
                            np.full(cfg.t, side * LANE_WIDTH)], axis=1)
        starts = np.stack([hist[0], nb_full[0]])
        labels = position_labels(starts, np.array([1.0, 0.0]), cfg)
        scenes.append(PredictionScene(hist, fut, nb_full[None, :cfg.t_h], labels, neighbor_full=nb_full[None],
                                      meta={"source": "shift", "synthetic": True}))
    return scenes


# shifted pair: per-step future displacement (metres) and isotropic noise std
SHIFT = (4.0, 0.0)
SHIFT_SIGMA = 2.0

SYNTHETIC_NAMES = ("chainA", "chainB", "synthA", "synthB", "parallel", "random", "shift0", "shift1")


def synthetic_scenes(name: str, cfg: SceneConfig, seed: int = 0, size: int = 200) -> list[PredictionScene]:
    """Named synthetic corpora for the command line and experiments."""
    if name in ("chainA", "synthA"):
        return chain_task_scenes("A", size, cfg, seed)
    if name in ("chainB", "synthB"):
        return chain_task_scenes("B", size, cfg, seed)
    if name == "parallel":
        return extract_scenes(resample(parallel_pair(cfg.t, cfg.rate_hz), cfg.rate_hz, cfg.rate_hz), cfg)
    if name == "random":
        recs = resample(random_corpus(size, 200, 10.0, seed), 10.0, cfg.rate_hz)
        return extract_scenes(recs, cfg, stride=cfg.t)
    if name == "shift0":
        return shifted_scenes(size, (0.0, 0.0), SHIFT_SIGMA, cfg, seed)
    if name == "shift1":
        return shifted_scenes(size, SHIFT, SHIFT_SIGMA, cfg, seed + 1)
    raise KeyError(f"unknown synthetic corpus {name!r}; choose from {', '.join(SYNTHETIC_NAMES)}")
