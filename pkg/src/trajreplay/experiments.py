"""Documented desk-scale experiments shared by the acceptance tests, scripts and CLI.

``ForgettingChainSpec``  two-task synthetic chain (lane keeping, then lane
                         changes) run under every lifelong strategy, plus the
                         single-task chain on the first task alone.
``ShiftPairSpec``        conditional KL between two synthetic corpora whose
                         futures differ by a known displacement.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import plain
from .data import SceneConfig, normalize_scene
from .lifelong import STRATEGIES, ChainConfig, TaskArchive, TaskChain, _Memo, run_chain
from .mdn import CkldConfig, MdnConfig, ckld, fit_mdn, scene_pairs
from .predictor import PredictorConfig
from .r2gan import DiscriminatorConfig, GanConfig, GeneratorConfig
from .synthetic import SHIFT, SHIFT_SIGMA, chain_task_scenes, shifted_scenes


def forgetting_chain_config() -> ChainConfig:
    return ChainConfig(
        generator=GeneratorConfig(encoder=32, recurrent=32),
        discriminator=DiscriminatorConfig(encoder=32),
        gan=GanConfig(epochs=60, batch_size=64, learning_rate=1e-3, beta1=0.5, ema_decay=0.99,
                      diagnostic_samples=300),
        predictor=PredictorConfig(epochs=40),
    )


@dataclass
class ForgettingChainSpec:
    groups: int = 200           # vehicle groups per training task, three scenes each
    test_groups: int = 60
    seed: int = 0
    strategies: tuple[str, ...] = STRATEGIES
    chain: ChainConfig = field(default_factory=forgetting_chain_config)


def forgetting_tasks(spec: ForgettingChainSpec) -> list[TaskArchive]:
    """Task A (lane keeping) then task B (lane changes to the left)."""
    cfg = spec.chain.scene
    out = []
    for kind in ("A", "B"):
        train = chain_task_scenes(kind, spec.groups, cfg, seed=spec.seed)
        test = chain_task_scenes(kind, spec.test_groups, cfg, seed=spec.seed + 10_000)
        out.append(TaskArchive(kind, [normalize_scene(s) for s in train], [normalize_scene(s) for s in test]))
    return out


def run_forgetting_chain(spec: ForgettingChainSpec) -> dict:
    """Every strategy on the two-task chain and on the single-task chain.

    Returns JSON-ready reports, a summary of the ratios the acceptance
    criteria check, and wall-clock seconds.
    """
    start = time.time()
    memo = _Memo()
    tasks = forgetting_tasks(spec)
    two = {s: run_chain(TaskChain(tasks, s, spec.chain, spec.seed), memo) for s in spec.strategies}
    single = {s: run_chain(TaskChain(tasks[:1], s, spec.chain, spec.seed), memo) for s in spec.strategies}
    summary = {"complete": all(r.status == "complete" for r in [*two.values(), *single.values()])}
    if summary["complete"]:
        summary["task_a_after_a"] = {s: r.rmse(0, "A") for s, r in two.items()}
        summary["task_a_after_b"] = {s: r.rmse(1, "A") for s, r in two.items()}
        summary["single_task"] = {s: r.rmse(0, "A") for s, r in single.items()}
    return {"spec": plain(spec), "summary": summary,
            "two_task": {s: r.to_json() for s, r in two.items()},
            "single_task": {s: r.to_json() for s, r in single.items()},
            "memo_hits": memo.hits, "seconds": time.time() - start}


def shift_mdn_config() -> MdnConfig:
    # one small component model: the true conditional is a single Gaussian with a linear mean
    return MdnConfig(m=1, hidden=(8,), batch_size=256, epochs=800, learning_rate=1e-3, final_lr_fraction=0.05)


@dataclass
class ShiftPairSpec:
    scenes: int = 12_000
    shift: tuple[float, float] = SHIFT     # metres added to every future step
    sigma: float = SHIFT_SIGMA            # isotropic future noise, metres
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    mdn: MdnConfig = field(default_factory=shift_mdn_config)
    ckld: CkldConfig = field(default_factory=CkldConfig)

    @property
    def analytic_ckld(self) -> float:
        offset_sq = self.scene.t_f * float(np.dot(self.shift, self.shift))
        return offset_sq / (2 * self.sigma ** 2)


def run_shift_pair(spec: ShiftPairSpec) -> dict:
    """Self, split-half and shifted CKLD on the shifted synthetic pair."""
    start = time.time()
    base = shifted_scenes(spec.scenes, (0.0, 0.0), spec.sigma, spec.scene, seed=spec.seed)
    moved = shifted_scenes(spec.scenes, spec.shift, spec.sigma, spec.scene, seed=spec.seed + 1)
    (x0, y0), (x1, y1) = scene_pairs(base, spec.scene), scene_pairs(moved, spec.scene)
    shared = fit_mdn(x0, y0, spec.mdn)
    half = len(x0) // 2
    first, second = fit_mdn(x0[:half], y0[:half], spec.mdn), fit_mdn(x0[half:], y0[half:], spec.mdn)
    other = fit_mdn(x1, y1, spec.mdn)
    return {
        "spec": plain(spec),
        "analytic": spec.analytic_ckld,
        "self": ckld(shared, shared, x0, spec.ckld).to_json(),
        "halves": ckld(first, second, x0[:half], spec.ckld).to_json(),
        "shifted": ckld(shared, other, x0, spec.ckld).to_json(),
        "seconds": time.time() - start,
    }
