"""Train R2GAN on chain task A and measure how useful its replay is to the predictor.

Reports the future/history extent ratio and second-difference jitter of
replayed targets next to the real ones, and the task-A test RMSE of
predictors trained on replay alone and on replay plus real task-B scenes.

    python scripts/gan_replay_quality.py --epochs 60 --ema 0.99
"""
from __future__ import annotations

import argparse
import time
from dataclasses import dataclass, replace

import numpy as np

from trajreplay.data import normalize_scene
from trajreplay.experiments import forgetting_chain_config
from trajreplay.lifelong import train_memory
from trajreplay.predictor import evaluate_rmse, train_predictor
from trajreplay.synthetic import chain_task_scenes


@dataclass
class ReplayProbe:
    groups: int = 200
    test_groups: int = 60
    epochs: int | None = None
    learning_rate: float | None = None
    ema: float | None = None
    seed: int = 0


def extent_ratio(scenes) -> float:
    return float(np.mean([abs(s.target_future[-1, 0]) / abs(s.target_history[0, 0]) for s in scenes]))


def jitter(scenes) -> float:
    paths = np.stack([np.concatenate([s.target_history, s.target_future]) for s in scenes])
    return float(np.abs(np.diff(paths, 2, axis=1)).mean())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=200)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--lr", type=float)
    ap.add_argument("--ema", type=float)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    probe = ReplayProbe(a.groups, 60, a.epochs, a.lr, a.ema, a.seed)
    cfg = forgetting_chain_config()
    gan = cfg.gan
    if probe.epochs is not None:
        gan = replace(gan, epochs=probe.epochs)
    if probe.learning_rate is not None:
        gan = replace(gan, learning_rate=probe.learning_rate)
    if probe.ema is not None:
        gan = replace(gan, ema_decay=probe.ema)
    cfg.gan = gan
    task_a = [normalize_scene(s) for s in chain_task_scenes("A", probe.groups, cfg.scene, probe.seed)]
    task_b = [normalize_scene(s) for s in chain_task_scenes("B", probe.groups, cfg.scene, probe.seed)]
    test_a = [normalize_scene(s) for s in chain_task_scenes("A", probe.test_groups, cfg.scene, probe.seed + 10_000)]
    start = time.time()
    memory = train_memory(task_a, cfg, seed=probe.seed)
    gan_s = time.time() - start
    replayed = memory.replay(len(task_a), cfg.gan.gp, seed=probe.seed + 1)
    alone = train_predictor(replayed, cfg.predictor)
    mixed = train_predictor(replayed + task_b, cfg.predictor)
    real = train_predictor(task_a, cfg.predictor)
    print(f"extent ratio  real {extent_ratio(task_a):.4f}  replay {extent_ratio(replayed):.4f}")
    print(f"jitter        real {jitter(task_a):.5f}  replay {jitter(replayed):.5f}")
    print(f"task-A RMSE   real-A {evaluate_rmse(real, test_a).mean_rmse:.3f}  "
          f"replay {evaluate_rmse(alone, test_a).mean_rmse:.3f}  "
          f"replay+B {evaluate_rmse(mixed, test_a).mean_rmse:.3f}")
    print(f"GAN training {gan_s:.0f} s")


if __name__ == "__main__":
    main()
