"""Conditional recurrent GAN used as the generative memory.

The generator maps Gaussian-process noise paths plus per-vehicle position
labels to whole scenes: noise is encoded per step, run through a
bidirectional GRU whose initial states come from the encoded label, the two
directions are averaged and encoded, and each vehicle is finally decoded
together with the mean of its pairwise-difference codes to the others.
The regression discriminator scores a centred, max-normalised scene from the
target's history, the target's future and the target-minus-neighbour history
differences (mean pooled).
"""
from __future__ import annotations

import functools
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import energy_distance

from . import nn
from .batch import (N_LABELS, SceneBatch, canonical_order, make_batch, masked_mean_pool, one_hot_labels,
                    take_vehicles)
from .data import PredictionScene

log = logging.getLogger(__name__)


class GanCollapseWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Gaussian-process prior


@dataclass(frozen=True)
class GpPriorConfig:
    samples_per_vehicle: int = 4
    sequence_length: int = 41
    rbf_lengthscale: float = 10.0
    rbf_variance: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.samples_per_vehicle < 1:
            raise ValueError("samples_per_vehicle must be >= 1")
        if self.rbf_lengthscale <= 0:
            raise ValueError("rbf_lengthscale must be positive")


def rbf_kernel(t: int, lengthscale: float, variance: float) -> np.ndarray:
    s = np.arange(t, dtype=np.float64)
    return variance * np.exp(-((s[:, None] - s[None, :]) ** 2) / (2.0 * lengthscale ** 2))


@functools.lru_cache(maxsize=32)
def _gp_factor(t: int, lengthscale: float, variance: float) -> np.ndarray:
    k = rbf_kernel(t, lengthscale, variance)
    for jitter in (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8):
        try:
            return np.linalg.cholesky(k + jitter * variance * np.eye(t))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("RBF kernel is not positive definite even with 1e-8 jitter")


def gp_factor(cfg: GpPriorConfig) -> np.ndarray:
    return _gp_factor(cfg.sequence_length, float(cfg.rbf_lengthscale), float(cfg.rbf_variance))


def sample_gp_prior(cfg: GpPriorConfig, n_vehicles: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``samples_per_vehicle * n_vehicles`` independent GP paths, shape (m*n, t).

    Rows ``m*(j-1) .. m*j - 1`` belong to vehicle ``j``.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    lf = gp_factor(cfg)
    z = rng.standard_normal((cfg.samples_per_vehicle * n_vehicles, cfg.sequence_length))
    return z @ lf.T


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class GeneratorConfig:
    t_h: int = 16
    t_f: int = 25
    samples_per_vehicle: int = 4
    encoder: int = 64
    recurrent: int = 128
    seed: int = 0

    @property
    def t(self) -> int:
        return self.t_h + self.t_f


class GeneratorModel:
    """Blocks: noise_encoder (M_g0), cond_fwd / cond_bwd (M_g1, M_g2), bigru,
    seq_encoder (M_g3), pair_encoder (M_g4), head (M_g5) and head_out (FC + tanh)."""

    def __init__(self, cfg: GeneratorConfig, params: nn.ModelParams | None = None):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            e, h = cfg.encoder, cfg.recurrent
            params = nn.ModelParams()
            nn.init_mlp(params, "noise_encoder", [cfg.samples_per_vehicle, e], rng)
            nn.init_mlp(params, "cond_fwd", [N_LABELS, e, h], rng)
            nn.init_mlp(params, "cond_bwd", [N_LABELS, e, h], rng)
            nn.init_bigru(params, "bigru", e, h, rng)
            nn.init_mlp(params, "seq_encoder", [h, e], rng)
            nn.init_mlp(params, "pair_encoder", [e, e], rng)
            nn.init_mlp(params, "head", [2 * e, e], rng)
            nn.init_fc(params, "head_out", e, 2, rng)
        self.params = params

    @property
    def provenance_id(self) -> str:
        return "gen-" + self.params.digest()

    def copy(self) -> "GeneratorModel":
        return GeneratorModel(self.cfg, self.params.copy())


@dataclass(frozen=True)
class DiscriminatorConfig:
    t_h: int = 16
    t_f: int = 25
    encoder: int = 64
    seed: int = 0


class DiscriminatorModel:
    """Blocks: target_encoder (M_rd0, shared by history and future), neighbor_encoder
    (M_rd1), fuse (two FC layers) and head (FC to one logit)."""

    def __init__(self, cfg: DiscriminatorConfig, params: nn.ModelParams | None = None):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            e = cfg.encoder
            span = max(cfg.t_h, cfg.t_f)
            params = nn.ModelParams()
            nn.init_mlp(params, "target_encoder", [2 * span, e, e], rng)
            nn.init_mlp(params, "neighbor_encoder", [2 * cfg.t_h, e, e], rng)
            nn.init_mlp(params, "fuse", [3 * e, e, e], rng)
            nn.init_fc(params, "head", e, 1, rng)
        self.params = params

    def copy(self) -> "DiscriminatorModel":
        return DiscriminatorModel(self.cfg, self.params.copy())


def generate_batch(gen: GeneratorModel, noise: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Generated trajectories (B, V, t, 2) in [-1, 1].

    ``noise`` is (B, V, m, t); ``labels`` and ``mask`` are (B, V).
    """
    p = gen.params
    b, v, m, t = noise.shape
    # compute in a content-defined vehicle order, return in the caller's order
    order = canonical_order(torch.cat([labels.unsqueeze(-1).to(noise.dtype), noise.reshape(b, v, -1)], -1), mask)
    noise, labels, mask = take_vehicles(noise, order), take_vehicles(labels, order), take_vehicles(mask, order)
    x = noise.permute(0, 1, 3, 2).reshape(b * v, t, m)
    x = nn.forward_mlp(p, "noise_encoder", x)
    onehot = one_hot_labels(labels).reshape(b * v, N_LABELS)
    h_f = nn.forward_mlp(p, "cond_fwd", onehot, out_activation="tanh")
    h_b = nn.forward_mlp(p, "cond_bwd", onehot, out_activation="tanh")
    e_f, e_b = nn.forward_bigru(p, "bigru", x, h_f, h_b)
    code = nn.forward_mlp(p, "seq_encoder", 0.5 * (e_f + e_b)).reshape(b, v, t, -1)
    # pair[b, i, j] = M_g4(E^i - E^j), pooled over i != j
    diff = code.unsqueeze(2) - code.unsqueeze(1)
    pair = nn.forward_mlp(p, "pair_encoder", diff)
    eye = torch.eye(v, dtype=torch.bool)
    pair_mask = mask.unsqueeze(2) & mask.unsqueeze(1) & ~eye
    pooled = masked_mean_pool(pair, pair_mask, dim=1)          # (B, V_j, t, e)
    out = nn.forward_mlp(p, "head", torch.cat([code, pooled], dim=-1))
    return take_vehicles(torch.tanh(nn.forward_fc(p, "head_out", out)), torch.argsort(order, dim=1))


def generate_scene(gen: GeneratorModel, noise, conds) -> np.ndarray:
    """One scene: ``noise`` (n*m, t) with vehicle j's rows at m*(j-1)..m*j-1 and
    one label per vehicle. Returns (n, t, 2)."""
    conds = np.asarray(conds, dtype=np.int64).reshape(-1)
    n = len(conds)
    if n < 2:
        raise ValueError("a generated scene needs at least two vehicles")
    m = gen.cfg.samples_per_vehicle
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] != n * m:
        raise nn.DimensionError(f"noise_encoder expects {n * m} noise rows for {n} vehicles, got {noise.shape[0]}")
    nz = torch.from_numpy(noise.reshape(1, n, m, -1))
    with torch.no_grad():
        out = generate_batch(gen, nz, torch.from_numpy(conds[None]), torch.ones(1, n, dtype=torch.bool))
    return out[0].numpy()


def normalize_generated(full: torch.Tensor, mask: torch.Tensor, t_h: int) -> torch.Tensor:
    """Centre on the target at the last history step and divide by the largest
    absolute coordinate of the valid vehicles (differentiable)."""
    centred = full - full[:, :1, t_h - 1:t_h, :]
    m = mask[:, :, None, None].to(full.dtype)
    scale = (centred.abs() * m).amax(dim=(1, 2, 3)).clamp(min=1e-12)
    return centred * m / scale[:, None, None, None]


def discriminate_batch(dis: DiscriminatorModel, hist: torch.Tensor, fut: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Logits (B,) for histories (B, V, t_h, 2), target futures (B, t_f, 2)."""
    p = dis.params
    if mask.shape[1] < 2 or not bool(mask[:, 1:].any(dim=1).all()):
        raise ValueError("every scene needs at least one neighbour")
    span = max(dis.cfg.t_h, dis.cfg.t_f)
    b = hist.shape[0]
    th = hist[:, 0]
    # shared encoder: history left-padded, future right-padded to the same span
    h_in = torch.cat([th.new_zeros(b, span - th.shape[1], 2), th], dim=1).reshape(b, -1)
    f_in = torch.cat([fut, fut.new_zeros(b, span - fut.shape[1], 2)], dim=1).reshape(b, -1)
    e_h = nn.forward_mlp(p, "target_encoder", h_in)
    e_f = nn.forward_mlp(p, "target_encoder", f_in)
    rel = (th.unsqueeze(1) - hist[:, 1:]).reshape(b, hist.shape[1] - 1, -1)
    order = canonical_order(rel, mask[:, 1:])
    rel, nmask = take_vehicles(rel, order), take_vehicles(mask[:, 1:], order)
    e_n = masked_mean_pool(nn.forward_mlp(p, "neighbor_encoder", rel), nmask, dim=1)
    f = nn.forward_mlp(p, "fuse", torch.cat([e_h, e_f, e_n], dim=-1))
    return nn.forward_fc(p, "head", f)[:, 0]


def discriminate(dis: DiscriminatorModel, scene: PredictionScene) -> float:
    if scene.n_neighbors == 0:
        raise ValueError("discriminator needs at least one neighbour")
    b = make_batch([scene])
    with torch.no_grad():
        return float(discriminate_batch(dis, b.hist, b.fut, b.mask)[0])


# ---------------------------------------------------------------------------
# conditions


class ConditionSampler:
    """Empirical distribution over per-scene label tuples (target first)."""

    def __init__(self, label_sets: Sequence[Sequence[int]]):
        if not label_sets:
            raise ValueError("need at least one label set")
        counts = Counter(tuple(int(v) for v in ls) for ls in label_sets)
        self.support = sorted(counts)
        total = sum(counts.values())
        self.probs = np.array([counts[k] / total for k in self.support])

    @classmethod
    def from_distribution(cls, support, probs) -> "ConditionSampler":
        out = cls.__new__(cls)
        out.support = [tuple(int(v) for v in k) for k in support]
        out.probs = np.asarray(probs, dtype=np.float64)
        if len(out.support) != len(out.probs) or not np.isclose(out.probs.sum(), 1.0):
            raise ValueError("support and probabilities do not form a distribution")
        return out

    @classmethod
    def from_scenes(cls, scenes: Sequence[PredictionScene]) -> "ConditionSampler":
        return cls([s.position_labels.tolist() for s in scenes])

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        return self.support[int(rng.choice(len(self.support), p=self.probs))]

    def probabilities(self) -> dict[tuple[int, ...], float]:
        return dict(zip(self.support, self.probs.tolist()))


# ---------------------------------------------------------------------------
# training


@dataclass
class GanConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    d_steps: int = 1
    g_steps: int = 1
    seed: int = 0
    diagnostic_samples: int = 2000
    collapse_threshold: float = 1e-6
    collapse_patience: int = 100
    max_steps: int | None = None
    # cosine decay of both learning rates down to lr * final_lr_fraction; 1.0 = constant
    final_lr_fraction: float = 1.0
    # exponential moving average of generator weights, copied into the generator at the end; None = off
    ema_decay: float | None = None
    gp: GpPriorConfig = field(default_factory=GpPriorConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.d_steps < 1 or self.g_steps < 0:
            raise ValueError("d_steps >= 1 and g_steps >= 0 required (g_steps=0 trains the discriminator only)")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must be in (0, 1]")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GanTrainLog:
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)
    energy: list[float] = field(default_factory=list)
    collapsed: bool = False
    warnings: list[str] = field(default_factory=list)


def _noise_tensor(lf: torch.Tensor, b: int, v: int, m: int, gen: torch.Generator) -> torch.Tensor:
    z = torch.randn(b, v, m, lf.shape[0], generator=gen, dtype=torch.float64)
    return z @ lf.T


def _bce_logits(logits: torch.Tensor, real: bool) -> torch.Tensor:
    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    return torch.nn.functional.softplus(-logits if real else logits).mean()


def energy_marginals(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over the x and y coordinates of the 1-D energy distances."""
    return float(sum(energy_distance(a[:, k], b[:, k]) for k in range(2)))


def _valid_coords(full: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return full[mask].reshape(-1, 2)


def train_r2gan(scenes: Sequence[PredictionScene], gen: GeneratorModel, dis: DiscriminatorModel,
                cfg: GanConfig, callback: Callable[[int, GanTrainLog], None] | None = None):
    """Alternating non-saturating GAN updates. Returns (gen, dis, log); models are updated in place.

    ``scenes`` must be normalised and carry neighbour futures.
    """
    scenes = [s for s in scenes if s.neighbor_full is not None and s.n_neighbors > 0]
    if not scenes:
        raise ValueError("no scenes with neighbour futures to train on")
    if gen.cfg.t != cfg.gp.sequence_length:
        raise ValueError("GP sequence length must equal the generator's scene length")
    rng = np.random.default_rng(cfg.seed)
    tgen = torch.Generator().manual_seed(cfg.seed)
    lf = torch.from_numpy(gp_factor(cfg.gp))
    m = gen.cfg.samples_per_vehicle
    t_h = gen.cfg.t_h
    # bucket by vehicle count so batches need no padding
    buckets: dict[int, list[PredictionScene]] = {}
    for s in scenes:
        buckets.setdefault(s.n_vehicles, []).append(s)
    opt_g = nn.AdamState.for_params(gen.params, cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = nn.AdamState.for_params(dis.params, cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    tlog = GanTrainLog()
    low_streak = 0
    steps = 0
    diag_idx = rng.choice(len(scenes), size=min(cfg.diagnostic_samples, len(scenes)), replace=False)
    diag_batch = make_batch([scenes[i] for i in diag_idx], need_full=True)
    ema = None if cfg.ema_decay is None else {k: t.detach().clone() for k, t in gen.params.items()}

    for epoch in range(cfg.epochs):
        lr = nn.cosine_lr(cfg.learning_rate, cfg.final_lr_fraction, epoch / max(cfg.epochs - 1, 1))
        opt_g.learning_rate = opt_d.learning_rate = lr
        batches = []
        for v in sorted(buckets):
            items = buckets[v]
            order = rng.permutation(len(items))
            batches += [[items[i] for i in order[k:k + cfg.batch_size]] for k in range(0, len(items), cfg.batch_size)]
        for bi in rng.permutation(len(batches)):
            real = make_batch(batches[bi], need_full=True)
            b, v = real.mask.shape
            for _ in range(cfg.d_steps):
                with torch.no_grad():
                    fake_full = generate_batch(gen, _noise_tensor(lf, b, v, m, tgen), real.labels, real.mask)
                fake_full = normalize_generated(fake_full, real.mask, t_h)
                d_loss = (_bce_logits(discriminate_batch(dis, real.hist, real.fut, real.mask), True)
                          + _bce_logits(discriminate_batch(dis, fake_full[:, :, :t_h], fake_full[:, 0, t_h:],
                                                           real.mask), False))
                info = nn.adam_step(dis.params, nn.backward(d_loss, dis.params), opt_d)
                if not info.accepted:
                    tlog.warnings.append(f"discriminator step rejected: {info.reason}")
            g_loss = torch.tensor(float("nan"))
            for _ in range(cfg.g_steps):
                fake_full = normalize_generated(
                    generate_batch(gen, _noise_tensor(lf, b, v, m, tgen), real.labels, real.mask), real.mask, t_h)
                g_loss = _bce_logits(discriminate_batch(dis, fake_full[:, :, :t_h], fake_full[:, 0, t_h:],
                                                        real.mask), True)
                info = nn.adam_step(gen.params, nn.backward(g_loss, gen.params), opt_g)
                if not info.accepted:
                    tlog.warnings.append(f"generator step rejected: {info.reason}")
            if ema is not None:
                with torch.no_grad():
                    for k, t in gen.params.items():
                        ema[k].mul_(cfg.ema_decay).add_(t.detach(), alpha=1 - cfg.ema_decay)
            tlog.d_loss.append(float(d_loss.detach()))
            tlog.g_loss.append(float(g_loss.detach()))
            low_streak = low_streak + 1 if tlog.d_loss[-1] < cfg.collapse_threshold else 0
            steps += 1
            if low_streak >= cfg.collapse_patience:
                tlog.collapsed = True
                msg = f"discriminator loss below {cfg.collapse_threshold} for {low_streak} steps; stopping"
                tlog.warnings.append(msg)
                warnings.warn(msg, GanCollapseWarning, stacklevel=2)
                break
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        tlog.energy.append(_diagnostic(gen, diag_batch, lf, m, t_h, tgen))
        if callback is not None:
            callback(epoch, tlog)
        if tlog.collapsed or (cfg.max_steps is not None and steps >= cfg.max_steps):
            break
    if ema is not None:
        with torch.no_grad():
            for k, t in gen.params.items():
                t.copy_(ema[k])
    return gen, dis, tlog


def _diagnostic(gen, batch: SceneBatch, lf, m, t_h, tgen) -> float:
    b, v = batch.mask.shape
    with torch.no_grad():
        fake = normalize_generated(generate_batch(gen, _noise_tensor(lf, b, v, m, tgen), batch.labels, batch.mask),
                                   batch.mask, t_h)
    mask = batch.mask.numpy()
    return energy_marginals(_valid_coords(batch.full.numpy(), mask), _valid_coords(fake.numpy(), mask))


# ---------------------------------------------------------------------------
# replay


def replay(gen: GeneratorModel, n_scenes: int, cond_sampler: ConditionSampler, gp_cfg: GpPriorConfig,
           seed: int = 0, batch_size: int = 256) -> list[PredictionScene]:
    """Generate ``n_scenes`` normalised scenes tagged with the generator's id.

    Scene ``i`` draws its labels and noise from the stream (seed, i), so the
    output depends on ``batch_size`` only through floating-point rounding.
    """
    if n_scenes <= 0:
        return []
    lf = gp_factor(gp_cfg)
    m = gen.cfg.samples_per_vehicle
    t_h = gen.cfg.t_h
    labels, noises = [], []
    for i in range(n_scenes):
        r = np.random.default_rng([seed, i])
        lab = cond_sampler.sample(r)
        z = r.standard_normal((len(lab), m, gp_cfg.sequence_length))
        labels.append(lab)
        noises.append(z @ lf.T)
    by_count: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_count.setdefault(len(lab), []).append(i)
    out: list[PredictionScene | None] = [None] * n_scenes
    pid = gen.provenance_id
    for v, idxs in sorted(by_count.items()):
        for k in range(0, len(idxs), batch_size):
            chunk = idxs[k:k + batch_size]
            nz = torch.from_numpy(np.stack([noises[i] for i in chunk]))
            lab = torch.tensor([labels[i] for i in chunk], dtype=torch.long)
            mask = torch.ones(len(chunk), v, dtype=torch.bool)
            with torch.no_grad():
                full = normalize_generated(generate_batch(gen, nz, lab, mask), mask, t_h).numpy()
            for row, i in enumerate(chunk):
                out[i] = scene_from_generated(full[row], labels[i], t_h, {"synthetic": True, "generator": pid,
                                                                          "replay_index": i})
    return out


def scene_from_generated(full: np.ndarray, labels, t_h: int, meta: dict) -> PredictionScene:
    """Split a generated (n, t, 2) scene at ``t_h`` into a prediction scene."""
    s = PredictionScene(
        target_history=full[0, :t_h], target_future=full[0, t_h:], neighbor_histories=full[1:, :t_h],
        position_labels=np.asarray(labels), neighbor_full=full[1:], meta=dict(meta))
    return s
