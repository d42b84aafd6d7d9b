"""Task-chain orchestration for generative-replay lifelong prediction.

Strategies
----------
``GRTP-D``  generative memory merged by retraining on replay + new real data
``GRTP-T``  generative memory merged by retraining on replay of the old memory
            + replay of a temporary generator fitted to the new task
``JT``      joint training on every task seen so far (keeps all data)
``FM``      predictor fixed after the first task
``FT``      predictor fine-tuned on each new task

Raw training data of a task is only readable while that task is current,
except under ``JT``. Every read goes through :class:`TaskArchive`, which keeps
an access ledger and refuses training reads once revoked.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import from_dict, plain
from .data import PredictionScene, SceneConfig
from .predictor import PredictorConfig, PredictorModel, evaluate_rmse, train_predictor
from .r2gan import (ConditionSampler, DiscriminatorConfig, DiscriminatorModel, GanCollapseWarning, GanConfig,
                    GeneratorConfig, GeneratorModel, GpPriorConfig, replay, train_r2gan)

log = logging.getLogger(__name__)

STRATEGIES = ("GRTP-D", "GRTP-T", "JT", "FM", "FT")
READ_KINDS = ("train", "eval", "analysis")


class StorageContractError(RuntimeError):
    pass


class UnknownStrategyError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown strategy {name!r}; valid strategies: {', '.join(STRATEGIES)}")


# ---------------------------------------------------------------------------
# archives


@dataclass
class AccessRecord:
    task_id: str
    step: int
    kind: str
    stage: str
    count: int


class TaskArchive:
    """Train/test scenes of one task behind an access ledger."""

    def __init__(self, task_id: str, train: Sequence[PredictionScene], test: Sequence[PredictionScene],
                 ledger: list[AccessRecord] | None = None):
        if not train or not test:
            raise ValueError(f"task {task_id!r} needs non-empty train and test scenes")
        self.task_id = task_id
        self._train = list(train)
        self._test = list(test)
        self.ledger = ledger if ledger is not None else []
        self.revoked = False
        self.clock: Callable[[], int] = lambda: -1

    @property
    def n_train(self) -> int:
        return len(self._train)

    def revoke(self) -> None:
        self.revoked = True

    def read(self, kind: str, stage: str) -> list[PredictionScene]:
        if kind not in READ_KINDS:
            raise ValueError(f"read kind must be one of {READ_KINDS}")
        if kind == "train" and self.revoked:
            raise StorageContractError(f"training data of task {self.task_id!r} was released at an earlier step")
        data = self._test if kind == "eval" else self._train
        self.ledger.append(AccessRecord(self.task_id, self.clock(), kind, stage, len(data)))
        return list(data)


def storage_violations(ledger: Sequence[AccessRecord], task_order: Sequence[str]) -> list[AccessRecord]:
    """Training reads of task ``i`` made during a later step."""
    pos = {t: i for i, t in enumerate(task_order)}
    return [r for r in ledger if r.kind == "train" and r.step > pos[r.task_id]]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ChainConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(encoder=32, recurrent=32))
    discriminator: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(encoder=32))
    gan: GanConfig = field(default_factory=GanConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    replay_ratio: float = 1.0
    predictor_data: str = "replay+current"
    replay_batch: int = 256

    def __post_init__(self):
        if self.predictor_data not in ("replay+current", "replay"):
            raise ValueError("predictor_data must be 'replay+current' or 'replay'")
        if self.replay_ratio < 0:
            raise ValueError("replay_ratio must be >= 0")
        t = self.scene.t
        if self.gan.gp.sequence_length != t:
            self.gan = _replace_gp(self.gan, t)

    def to_dict(self) -> dict:
        return plain(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ChainConfig":
        return from_dict(cls, d)


def _replace_gp(gan: GanConfig, t: int) -> GanConfig:
    gp = gan.gp
    gan.gp = GpPriorConfig(gp.samples_per_vehicle, t, gp.rbf_lengthscale, gp.rbf_variance, gp.rng_seed)
    return gan


def _seed(*parts) -> int:
    h = hashlib.sha256(json.dumps(parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


# ---------------------------------------------------------------------------
# generative memory


@dataclass
class GenerativeMemory:
    generator: GeneratorModel
    sampler: ConditionSampler
    warnings: list[str] = field(default_factory=list)

    @property
    def provenance_id(self) -> str:
        return self.generator.provenance_id

    def replay(self, n: int, gp: GpPriorConfig, seed: int, batch_size: int = 256) -> list[PredictionScene]:
        return replay(self.generator, n, self.sampler, gp, seed=seed, batch_size=batch_size)


def scenes_digest(scenes: Sequence[PredictionScene]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        for a in (s.target_history, s.target_future, s.neighbor_histories, s.position_labels,
                  s.neighbor_full if s.neighbor_full is not None else np.zeros(0), s.offset, np.array([s.scale])):
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


class _Memo:
    """Content-addressed cache so identical trainings are shared between strategies."""

    def __init__(self):
        self.store: dict[str, object] = {}
        self.hits = 0

    def get(self, key: str, fn):
        if key in self.store:
            self.hits += 1
        else:
            self.store[key] = fn()
        return self.store[key]


def train_memory(scenes: Sequence[PredictionScene], cfg: ChainConfig, seed: int,
                 memo: _Memo | None = None) -> GenerativeMemory:
    """Fresh generator and discriminator trained on ``scenes``."""
    def fit():
        gen = GeneratorModel(_with_seed(cfg.generator, seed))
        dis = DiscriminatorModel(_with_seed(cfg.discriminator, seed + 1))
        gan = GanConfig(**{**asdict(cfg.gan), "seed": seed, "gp": cfg.gan.gp})
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", GanCollapseWarning)
            _, _, tlog = train_r2gan(scenes, gen, dis, gan)
        notes = list(tlog.warnings) + [str(w.message) for w in caught if w.category is not GanCollapseWarning]
        return GenerativeMemory(gen, ConditionSampler.from_scenes(scenes), notes)

    if memo is None:
        return fit()
    key = json.dumps(["gan", scenes_digest(scenes), cfg.to_dict(), seed])
    return memo.get(key, fit)


def _with_seed(c, seed):
    return type(c)(**{**asdict(c), "seed": seed})


def first_memory(scenes: Sequence[PredictionScene], cfg: ChainConfig, seed: int,
                 memo: _Memo | None = None) -> GenerativeMemory:
    """Memory of the first task: plain R2GAN training on its real scenes.

    LDM and LTM coincide here and share the seed, so a memo trains it once.
    """
    return train_memory(scenes, cfg, _seed(seed, "first"), memo)


def run_ldm_step(longterm: GenerativeMemory | None, new_task_scenes: Sequence[PredictionScene], cfg: ChainConfig,
                 seed: int = 0, memo: _Memo | None = None) -> GenerativeMemory:
    """Retrain a fresh memory on replay(longterm, r * |new|) plus the new real scenes."""
    new = list(new_task_scenes)
    if longterm is None:
        return first_memory(new, cfg, seed, memo)
    n_rep = int(round(cfg.replay_ratio * len(new)))
    data = longterm.replay(n_rep, cfg.gan.gp, _seed(seed, "ldm-replay"), cfg.replay_batch) + new
    mem = train_memory(data, cfg, _seed(seed, "ldm-train"), memo)
    mem.warnings = longterm.warnings + mem.warnings
    return mem


def run_ltm_step(longterm: GenerativeMemory | None, new_task, cfg: ChainConfig, seed: int = 0,
                 memo: _Memo | None = None, stage_hook: Callable[[str], None] | None = None) -> GenerativeMemory:
    """Fit a temporary memory to the new task, then retrain the long-term memory on
    replay of both. ``new_task`` is a scene list or a :class:`TaskArchive`."""
    hook = stage_hook or (lambda stage: None)
    hook("ltm-temporal")
    new = new_task.read("train", "ltm-temporal") if isinstance(new_task, TaskArchive) else list(new_task)
    n_new = len(new)
    if longterm is None:
        return first_memory(new, cfg, seed, memo)
    temporal = train_memory(new, cfg, _seed(seed, "ltm-temporal"), memo)
    hook("ltm-merge")
    data = (longterm.replay(int(round(cfg.replay_ratio * n_new)), cfg.gan.gp, _seed(seed, "ltm-old"), cfg.replay_batch)
            + temporal.replay(n_new, cfg.gan.gp, _seed(seed, "ltm-new"), cfg.replay_batch))
    mem = train_memory(data, cfg, _seed(seed, "ltm-train"), memo)
    mem.warnings = longterm.warnings + temporal.warnings + mem.warnings
    return mem


# ---------------------------------------------------------------------------
# chains


@dataclass
class TaskChain:
    tasks: list[TaskArchive]
    strategy: str
    config: ChainConfig = field(default_factory=ChainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UnknownStrategyError(self.strategy)
        if not self.tasks:
            raise ValueError("a chain needs at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]


@dataclass
class TaskChainReport:
    strategy: str
    task_ids: list[str]
    seed: int
    config: dict
    evaluations: list[dict] = field(default_factory=list)   # {"after": i, "task": id, "report": EvalReport json}
    checkpoints: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    access_ledger: list[dict] = field(default_factory=list)
    ckld_matrix: list[list[float]] | None = None
    status: str = "complete"
    failed_stage: str | None = None
    error: str | None = None

    def rmse(self, after: int, task: str) -> float:
        for e in self.evaluations:
            if e["after"] == after and e["task"] == task:
                return e["report"]["mean_rmse"]
        raise KeyError((after, task))

    def matrix(self) -> list[list[float | None]]:
        """mean RMSE; rows = chain position, columns = tasks (None if not yet visited)."""
        n = len(self.task_ids)
        out = [[None] * n for _ in range(n)]
        for e in self.evaluations:
            out[e["after"]][self.task_ids.index(e["task"])] = e["report"]["mean_rmse"]
        return out

    def to_json(self) -> dict:
        return plain({k: getattr(self, k) for k in (
            "strategy", "task_ids", "seed", "config", "status", "failed_stage", "error", "evaluations",
            "checkpoints", "warnings", "access_ledger", "ckld_matrix")})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + self.task_ids)
        for i, row in enumerate(self.matrix()):
            if i < len(self.task_ids):
                w.writerow([self.task_ids[i]] + ["" if v is None else f"{v:.6f}" for v in row])
        return buf.getvalue()

    def curves_csv(self) -> str:
        """Plot-ready per-step RMSE curves, one row per (after, task, step)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "after_task", "eval_task", "time_s", "rmse_m"])
        for e in self.evaluations:
            r = e["report"]
            for k, v in enumerate(r["rmse_per_step"]):
                w.writerow([self.strategy, self.task_ids[e["after"]], e["task"],
                            f"{(k + 1) * r['step_seconds']:g}", f"{v:.6f}"])
        return buf.getvalue()


def _predictor(scenes, cfg: ChainConfig, seed: int, memo: _Memo | None, init: PredictorModel | None = None):
    pcfg = _with_seed(cfg.predictor, seed)

    def fit():
        return train_predictor(scenes, pcfg, init=init)

    if memo is None:
        return fit()
    key = json.dumps(["pred", scenes_digest(scenes), plain(pcfg), init.model_id if init else None])
    return memo.get(key, fit)


def run_chain(chain: TaskChain, memo: _Memo | None = None, evaluate_threads: int = 1) -> TaskChainReport:
    """Run every step of ``chain`` and evaluate on all visited tasks after each one.

    Training data of task ``i`` is released before step ``i + 1`` begins, except
    under joint training. A failing stage marks the report partial.
    """
    cfg = chain.config
    memo = memo if memo is not None else _Memo()
    report = TaskChainReport(chain.strategy, chain.task_ids, chain.seed,
                             {"chain": cfg.to_dict(), "strategy": chain.strategy, "seed": chain.seed})
    ledger: list[AccessRecord] = []
    step_box = [0]
    for t in chain.tasks:
        t.ledger = ledger
        t.revoked = False
        t.clock = lambda: step_box[0]
    memory: GenerativeMemory | None = None
    model: PredictorModel | None = None
    stage = "setup"
    try:
        for i, task in enumerate(chain.tasks):
            step_box[0] = i
            if i > 0 and chain.strategy != "JT":
                chain.tasks[i - 1].revoke()
            pseed = _seed(chain.seed, i, "predictor")
            if chain.strategy == "JT":
                stage = f"step {i}: joint predictor"
                data = [s for t in chain.tasks[:i + 1] for s in t.read("train", "jt-predictor")]
                model = _predictor(data, cfg, pseed, memo)
            elif chain.strategy == "FM":
                stage = f"step {i}: fixed predictor"
                if i == 0:
                    model = _predictor(task.read("train", "fm-predictor"), cfg, pseed, memo)
            elif chain.strategy == "FT":
                stage = f"step {i}: fine-tune predictor"
                model = _predictor(task.read("train", "ft-predictor"), cfg, pseed, memo, init=model)
            else:
                stage = f"step {i}: replay predictor"
                current = task.read("train", "grtp-predictor")
                replayed = []
                if memory is not None:
                    n_rep = int(round(cfg.replay_ratio * len(current) * i))
                    replayed = memory.replay(n_rep, cfg.gan.gp, _seed(chain.seed, i, "predictor-replay"),
                                             cfg.replay_batch)
                data = replayed + current if cfg.predictor_data == "replay+current" or memory is None else replayed
                model = _predictor(data, cfg, pseed, memo)
                stage = f"step {i}: memory update"
                mseed = _seed(chain.seed, i, "memory")
                if chain.strategy == "GRTP-D":
                    memory = run_ldm_step(memory, current, cfg, mseed, memo)
                else:
                    memory = run_ltm_step(memory, task, cfg, mseed, memo)
                report.checkpoints.append({"after": i, "generator": memory.provenance_id})
            report.checkpoints.append({"after": i, "predictor": model.model_id})
            stage = f"step {i}: evaluation"
            for t in chain.tasks[:i + 1]:
                ev = evaluate_rmse(model, t.read("eval", "evaluate"), cfg.scene.step_seconds, t.task_id)
                report.evaluations.append({"after": i, "task": t.task_id, "report": ev.to_json()})
    except Exception as exc:  # noqa: BLE001 - recorded in the report
        report.status = "partial"
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        log.error("chain %s failed at %s: %s", chain.strategy, stage, exc)
    if memory is not None:
        report.warnings.extend(memory.warnings)
    report.access_ledger = [asdict(r) for r in ledger]
    return report


def run_strategies(tasks: Sequence[TaskArchive], strategies: Sequence[str], cfg: ChainConfig,
                   seed: int = 0) -> dict[str, TaskChainReport]:
    """Run several strategies on the same tasks, sharing identical trainings."""
    memo = _Memo()
    out = {}
    for s in strategies:
        out[s] = run_chain(TaskChain(list(tasks), s, cfg, seed), memo)
    return out


def ckld_matrix(tasks: Sequence[TaskArchive], scene_cfg: SceneConfig, mdn_cfg, ckld_cfg, threads: int = 1):
    """Pairwise conditional KL between task training sets (zero diagonal)."""
    from .mdn import ckld, fit_mdn, scene_pairs

    pairs = [scene_pairs(t.read("analysis", "ckld"), scene_cfg) for t in tasks]
    models = [fit_mdn(x, y, mdn_cfg) for x, y in pairs]
    n = len(tasks)
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i][j] = ckld(models[i], models[j], pairs[i][0], ckld_cfg, threads=threads).mean
    return out
