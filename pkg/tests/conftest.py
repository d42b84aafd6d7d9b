from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajreplay.data import PredictionScene, SceneConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_scene(rng: np.random.Generator, n_vehicles: int = 3, cfg: SceneConfig | None = None,
                 full: bool = True, spread: float = 30.0) -> PredictionScene:
    """Vehicles on roughly parallel noisy tracks in metres."""
    cfg = cfg or SceneConfig()
    t = np.arange(cfg.t) * cfg.step_seconds
    paths = []
    for _ in range(n_vehicles):
        start = rng.uniform(-spread, spread, size=2)
        vel = np.array([rng.uniform(5, 30), rng.uniform(-1, 1)])
        paths.append(start + t[:, None] * vel + rng.normal(0, 0.2, size=(cfg.t, 2)))
    paths = np.stack(paths)
    labels = np.concatenate([[0], rng.integers(-4, 5, size=n_vehicles - 1)])
    return PredictionScene(
        target_history=paths[0, :cfg.t_h], target_future=paths[0, cfg.t_h:],
        neighbor_histories=paths[1:, :cfg.t_h], position_labels=labels,
        neighbor_full=paths[1:] if full else None)


def clustered_scene(rng: np.random.Generator, n: int, cfg: SceneConfig | None = None) -> PredictionScene:
    """Vehicles travelling together so that affinities are well away from zero."""
    cfg = cfg or SceneConfig()
    t = np.arange(cfg.t) * cfg.step_seconds
    base = np.array([rng.uniform(10, 30), 0.0])
    paths = np.stack([rng.uniform(-4, 4, size=2) + t[:, None] * (base + rng.uniform(-0.5, 0.5, size=2))
                      + rng.normal(0, 0.1, size=(cfg.t, 2)) for _ in range(n)])
    return PredictionScene(paths[0, :cfg.t_h], paths[0, cfg.t_h:], paths[1:, :cfg.t_h], np.zeros(n, dtype=int))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
