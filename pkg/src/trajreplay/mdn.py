"""Mixture density networks and Monte-Carlo conditional KL divergence.

An MDN maps a condition vector to an isotropic Gaussian mixture over the
flattened future trajectory. The conditional KL between two corpora is the
average, over conditions drawn from the first corpus, of a Monte-Carlo KL
estimate between the two fitted mixtures at that condition.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import nn
from .data import PredictionScene, SceneConfig, center_scene, denormalize_scene
from .spectral import scene_condition

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


class MdnDivergenceError(RuntimeError):
    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(f"{msg}: {diagnostics}")
        self.diagnostics = diagnostics


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class GmmParams:
    """Isotropic mixture: weights (m,), means (m, d), stds (m,)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("mixture weights must be a probability vector")
        if (self.stds <= 0).any():
            raise ValueError("component stds must be positive")


@dataclass
class MdnConfig:
    m: int = 20
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 4e-4
    batch_size: int = 4096
    epochs: int = 200
    holdout: float = 0.1
    seed: int = 0
    sigma_floor: float = SIGMA_FLOOR
    # cosine decay of the learning rate down to lr * final_lr_fraction; 1.0 = constant
    final_lr_fraction: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class MdnModel:
    """MLP trunk with three FC heads (weights, means, stds).

    Inputs are standardised with fixed per-feature statistics and the target
    with a shared shift and a single scale, so the mixture stays isotropic in
    source units.
    """

    def __init__(self, d_x: int, d_y: int, m: int = 20, hidden: Sequence[int] = (64, 64), seed: int = 0):
        self.d_x, self.d_y, self.m = d_x, d_y, m
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        self.params = nn.ModelParams()
        nn.init_mlp(self.params, "trunk", [d_x, *self.hidden], rng)
        z = self.hidden[-1]
        nn.init_fc(self.params, "head_alpha", z, m, rng)
        nn.init_fc(self.params, "head_mu", z, m * d_y, rng)
        nn.init_fc(self.params, "head_sigma", z, m, rng)
        self.x_mean = np.zeros(d_x)
        self.x_std = np.ones(d_x)
        self.y_mean = np.zeros(d_y)
        self.y_scale = 1.0
        self.sigma_floor = SIGMA_FLOOR
        self.trained = False
        self.history: list[dict] = []

    def heads(self, x: torch.Tensor):
        """Log-weights, means and stds in standardised target units."""
        if x.shape[-1] != self.d_x:
            raise nn.DimensionError(f"MDN expects condition dim {self.d_x}, got {x.shape[-1]}")
        xs = (x - nn.as_tensor(self.x_mean)) / nn.as_tensor(self.x_std)
        z = nn.forward_mlp(self.params, "trunk", xs)
        log_alpha = torch.log_softmax(nn.forward_fc(self.params, "head_alpha", z), dim=-1)
        mu = nn.forward_fc(self.params, "head_mu", z).reshape(*x.shape[:-1], self.m, self.d_y)
        sigma = torch.nn.functional.softplus(nn.forward_fc(self.params, "head_sigma", z))
        sigma = torch.clamp(sigma, min=self.sigma_floor)
        return log_alpha, mu, sigma

    def nll(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Mean negative log-likelihood of raw targets ``y`` given ``x``."""
        log_alpha, mu, sigma = self.heads(x)
        ys = (y - nn.as_tensor(self.y_mean)) / self.y_scale
        log_p = mixture_log_prob(log_alpha, mu, sigma, ys) - self.d_y * math.log(self.y_scale)
        return -log_p.mean()

    def describe(self) -> dict:
        return {"d_x": self.d_x, "d_y": self.d_y, "m": self.m, "hidden": list(self.hidden),
                "params": self.params.digest()}


def mixture_log_prob(log_alpha, mu, sigma, y):
    """log sum_i alpha_i N(y; mu_i, sigma_i^2 I) for batched torch inputs."""
    d = mu.shape[-1]
    sq = ((y.unsqueeze(-2) - mu) ** 2).sum(-1)
    log_phi = -0.5 * sq / sigma ** 2 - d * torch.log(sigma) - 0.5 * d * LOG_2PI
    return torch.logsumexp(log_alpha + log_phi, dim=-1)


def mdn_forward(model: MdnModel, x) -> GmmParams | list[GmmParams]:
    """Mixture parameters in source units for one condition (d_X,) or a batch (n, d_X)."""
    xt = nn.as_tensor(x)
    single = xt.dim() == 1
    if xt.shape[-1] != model.d_x:
        raise nn.DimensionError(f"MDN expects condition dim {model.d_x}, got {xt.shape[-1]}")
    with torch.no_grad():
        log_alpha, mu, sigma = model.heads(xt.reshape(-1, model.d_x))
    alpha = torch.exp(log_alpha).numpy()
    alpha = alpha / alpha.sum(-1, keepdims=True)
    means = mu.numpy() * model.y_scale + model.y_mean
    stds = sigma.numpy() * model.y_scale
    out = [GmmParams(alpha[i], means[i], stds[i]) for i in range(len(alpha))]
    return out[0] if single else out


def gmm_log_density(g: GmmParams, y: np.ndarray) -> np.ndarray | float:
    """log p(y) for one point (d,) or many (n, d), via log-sum-exp."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y2 = y.reshape(-1, g.dim)
    sq = ((y2[:, None, :] - g.means[None]) ** 2).sum(-1)                   # (n, m)
    with np.errstate(divide="ignore"):
        log_w = np.log(g.weights)
    log_phi = (-0.5 * sq / g.stds ** 2 - g.dim * np.log(g.stds) - 0.5 * g.dim * LOG_2PI)
    a = log_w + log_phi
    mx = a.max(axis=1, keepdims=True)
    out = (mx + np.log(np.exp(a - mx).sum(axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out


def gmm_sample(g: GmmParams, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(g.m, size=n, p=g.weights)
    return g.means[comp] + g.stds[comp, None] * rng.standard_normal((n, g.dim))


def kld_mc(g1: GmmParams, g2: GmmParams, n_mc: int, rng: np.random.Generator) -> float:
    """Monte-Carlo KL(g1 || g2) from ``n_mc`` draws of g1. Not clamped at zero."""
    if g1.dim != g2.dim:
        raise ValueError("mixtures live in different dimensions")
    y = gmm_sample(g1, n_mc, rng)
    return float(np.mean(gmm_log_density(g1, y) - gmm_log_density(g2, y)))


# ---------------------------------------------------------------------------
# training


def scene_pairs(scenes: Sequence[PredictionScene], cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Condition vectors and flattened futures of target-centred scenes in source units."""
    xs, ys = [], []
    for s in scenes:
        c = center_scene(denormalize_scene(s))
        xs.append(scene_condition(c, cfg))
        ys.append(c.target_future.reshape(-1))
    return np.asarray(xs), np.asarray(ys)


def fit_mdn(x: np.ndarray, y: np.ndarray, cfg: MdnConfig) -> MdnModel:
    """Train an MDN on condition/target arrays by minimising the NLL with Adam."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = MdnModel(x.shape[1], y.shape[1], cfg.m, cfg.hidden, seed=cfg.seed)
    model.sigma_floor = cfg.sigma_floor
    perm = rng.permutation(len(x))
    n_hold = int(round(cfg.holdout * len(x))) if len(x) >= 10 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    xt, yt = x[train], y[train]
    model.x_mean = xt.mean(0)
    model.x_std = np.where(xt.std(0) > 1e-8, xt.std(0), 1.0)
    model.y_mean = yt.mean(0)
    model.y_scale = float(yt.std()) if yt.std() > 1e-8 else 1.0
    X, Y = torch.from_numpy(xt), torch.from_numpy(yt)
    Xh, Yh = torch.from_numpy(x[hold]), torch.from_numpy(y[hold])
    state = nn.AdamState.for_params(model.params, cfg.learning_rate)

    def holdout_nll():
        if n_hold == 0:
            return float("nan")
        with torch.no_grad():
            return float(model.nll(Xh, Yh))

    model.history.append({"epoch": 0, "holdout_nll": holdout_nll()})
    for epoch in range(1, cfg.epochs + 1):
        frac = (epoch - 1) / max(cfg.epochs - 1, 1)
        state.learning_rate = nn.cosine_lr(cfg.learning_rate, cfg.final_lr_fraction, frac)
        order = torch.randperm(len(X), generator=gen)
        losses = []
        for i in range(0, len(X), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = model.nll(X[idx], Y[idx])
            grads = nn.backward(loss, model.params)
            info = nn.adam_step(model.params, grads, state)
            loss = float(loss.detach())
            if not info.accepted or not math.isfinite(loss):
                with torch.no_grad():
                    _, _, sig = model.heads(X[idx])
                diag = {"epoch": epoch, "loss": loss, "grad_norm": info.grad_norm,
                        "sigma_floor_hits": int((sig <= model.sigma_floor).sum()), "reason": info.reason}
                raise MdnDivergenceError("MDN training diverged", diag)
            losses.append(loss)
        model.history.append({"epoch": epoch, "train_nll": float(np.mean(losses)), "holdout_nll": holdout_nll()})
    model.trained = True
    return model


def train_mdn(scenes: Sequence[PredictionScene], cfg: MdnConfig, scene_cfg: SceneConfig) -> MdnModel:
    x, y = scene_pairs(scenes, scene_cfg)
    return fit_mdn(x, y, cfg)


# ---------------------------------------------------------------------------
# conditional KL


@dataclass
class CkldConfig:
    n_mc: int = 1000
    n_conditions: int = 2000
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_mc < 1 or self.n_conditions < 1:
            raise ValueError("n_mc and n_conditions must be >= 1")


@dataclass
class CkldResult:
    mean: float
    stderr: float
    per_condition: np.ndarray = field(repr=False)
    config: CkldConfig

    def histogram(self, bins: int = 20) -> dict:
        counts, edges = np.histogram(self.per_condition, bins=bins)
        return {"counts": counts.tolist(), "edges": edges.tolist()}

    def to_json(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_conditions": int(len(self.per_condition)),
                "config": asdict(self.config), "histogram": self.histogram()}


def ckld(model1: MdnModel, model2: MdnModel, conditions: np.ndarray, cfg: CkldConfig,
         threads: int = 1) -> CkldResult:
    """Conditional KL(p1 || p2) averaged over conditions drawn from corpus 1.

    Conditions are subsampled uniformly without replacement to at most
    ``cfg.n_conditions``. Each condition draws from its own RNG stream seeded
    by (seed, condition index), so the result does not depend on scheduling.
    """
    for mdl in (model1, model2):
        if not mdl.trained:
            raise UntrainedModelError("both MDNs must be trained before computing CKLD")
    conditions = np.asarray(conditions, dtype=np.float64)
    pick_rng = np.random.default_rng([cfg.rng_seed, 0])
    n1 = min(cfg.n_conditions, len(conditions))
    idx = np.sort(pick_rng.choice(len(conditions), size=n1, replace=False))
    xs = conditions[idx]
    g1s = mdn_forward(model1, xs)
    g2s = g1s if model2 is model1 else mdn_forward(model2, xs)

    def one(i):
        return kld_mc(g1s[i], g2s[i], cfg.n_mc, np.random.default_rng([cfg.rng_seed, 1, i]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            vals = np.array(list(ex.map(one, range(n1))))
    else:
        vals = np.array([one(i) for i in range(n1)])
    se = float(vals.std(ddof=1) / math.sqrt(n1)) if n1 > 1 else float("nan")
    return CkldResult(float(vals.mean()), se, vals, cfg)


def ckld_between(scenes1: Sequence[PredictionScene], scenes2: Sequence[PredictionScene], scene_cfg: SceneConfig,
                 mdn_cfg: MdnConfig, cfg: CkldConfig, shared_model: bool = False,
                 threads: int = 1) -> tuple[CkldResult, MdnModel, MdnModel]:
    """Full pipeline: condition vectors, one MDN per corpus, then the MC average."""
    x1, y1 = scene_pairs(scenes1, scene_cfg)
    m1 = fit_mdn(x1, y1, mdn_cfg)
    if shared_model:
        m2 = m1
    else:
        x2, y2 = scene_pairs(scenes2, scene_cfg)
        m2 = fit_mdn(x2, y2, mdn_cfg)
    return ckld(m1, m2, x1, cfg, threads=threads), m1, m2
