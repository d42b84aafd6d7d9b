"""Encoder-decoder trajectory predictor and RMSE evaluation.

The target history goes through a per-step MLP and an LSTM; the
target-minus-neighbour history differences go through an MLP and are summed.
Each branch has its own fuse MLP. The two fused codes become the decoder
LSTM's initial hidden and cell state, and the decoder feeds back its own
previous output for ``t_f`` steps.

The head emits per-step displacements that are accumulated from the last
observed target position.

Inputs are rescaled internally by the largest absolute coordinate of the
target history, so the prediction never depends on the (future-aware) scale
a normalised scene carries and is equivariant to the scene's units.
Predictions are returned in the scene's own frame.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import nn
from .batch import SceneBatch, canonical_order, make_batch, masked_sum_pool, take_vehicles
from .data import PredictionScene

log = logging.getLogger(__name__)

HORIZONS_SECONDS = (1.0, 2.0, 3.0, 4.0, 5.0)


class PredictorDivergenceError(RuntimeError):
    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(f"{msg}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class PredictorConfig:
    t_h: int = 16
    t_f: int = 25
    encoder: int = 32
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 3e-3
    final_lr_fraction: float = 0.05
    val_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class PredictorModel:
    """Blocks: hist_pre (M_r0), hist_lstm, nei_encoder (M_r1), fuse_hist and
    fuse_nei (M_r2, one per branch), dec_lstm and head (M_r3)."""

    def __init__(self, cfg: PredictorConfig, params: nn.ModelParams | None = None):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            e, h = cfg.encoder, cfg.hidden
            params = nn.ModelParams()
            nn.init_mlp(params, "hist_pre", [2, e], rng)
            nn.init_lstm(params, "hist_lstm", e, h, rng)
            nn.init_mlp(params, "nei_encoder", [2 * cfg.t_h, e, e], rng)
            nn.init_mlp(params, "fuse_hist", [h, h], rng)
            nn.init_mlp(params, "fuse_nei", [e, h], rng)
            nn.init_lstm(params, "dec_lstm", 2, h, rng)
            nn.init_mlp(params, "head", [h, 2], rng)
        self.params = params
        self.history: list[dict] = []

    @property
    def model_id(self) -> str:
        return "pred-" + self.params.digest()

    def copy(self) -> "PredictorModel":
        out = PredictorModel(self.cfg, self.params.copy())
        out.history = list(self.history)
        return out


def history_scale(batch: SceneBatch) -> torch.Tensor:
    """Per-scene internal unit, (B,): the largest absolute target-history
    coordinate, floored at 5% of the largest over all valid histories so a
    standing target does not blow up the inputs."""
    m = batch.mask[:, :, None, None].to(batch.hist.dtype)
    everything = (batch.hist.abs() * m).amax(dim=(1, 2, 3))
    target = batch.hist[:, 0].abs().amax(dim=(1, 2))
    return torch.maximum(target, 0.05 * everything).clamp(min=1e-9)


def forward_internal(model: PredictorModel, hist: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Future (B, t_f, 2) from histories (B, V, t_h, 2) already in the internal frame."""
    p = model.params
    b = hist.shape[0]
    if mask.shape[1] < 2 or not bool(mask[:, 1:].any(dim=1).all()):
        raise ValueError("every scene needs at least one neighbour")
    target = hist[:, 0]
    _, (h_last, _) = nn.forward_lstm(p, "hist_lstm", nn.forward_mlp(p, "hist_pre", target))
    e_hist = nn.forward_mlp(p, "fuse_hist", h_last, out_activation="tanh")
    rel = (target.unsqueeze(1) - hist[:, 1:]).reshape(b, hist.shape[1] - 1, -1)
    order = canonical_order(rel, mask[:, 1:])
    rel, nmask = take_vehicles(rel, order), take_vehicles(mask[:, 1:], order)
    pooled = masked_sum_pool(nn.forward_mlp(p, "nei_encoder", rel), nmask, dim=1)
    e_nei = nn.forward_mlp(p, "fuse_nei", pooled)
    h, c = e_hist, e_nei
    prev = target[:, -1]
    outs = []
    for _ in range(model.cfg.t_f):
        h, c = nn.lstm_cell(p, "dec_lstm", prev, h, c)
        prev = prev + nn.forward_mlp(p, "head", h, out_activation="none")
        outs.append(prev)
    return torch.stack(outs, dim=1)


def predict_batch(model: PredictorModel, batch: SceneBatch) -> torch.Tensor:
    s = history_scale(batch)[:, None, None]
    return forward_internal(model, batch.hist / s[:, None], batch.mask) * s


def predict(model: PredictorModel, scene: PredictionScene) -> np.ndarray:
    """Predicted future (t_f, 2) in the scene's coordinates."""
    if scene.n_neighbors == 0:
        raise ValueError("prediction needs at least one neighbour")
    with torch.no_grad():
        return predict_batch(model, make_batch([scene]))[0].numpy()


def predict_many(model: PredictorModel, scenes: Sequence[PredictionScene], batch_size: int = 512) -> np.ndarray:
    out = []
    with torch.no_grad():
        for k in range(0, len(scenes), batch_size):
            out.append(predict_batch(model, make_batch(scenes[k:k + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.t_f, 2))


def _internal_loss(model: PredictorModel, batch: SceneBatch) -> torch.Tensor:
    s = history_scale(batch)[:, None, None]
    pred = forward_internal(model, batch.hist / s[:, None], batch.mask)
    return ((pred - batch.fut / s) ** 2).mean()


def train_predictor(scenes: Sequence[PredictionScene], cfg: PredictorConfig,
                    val_scenes: Sequence[PredictionScene] | None = None,
                    init: PredictorModel | None = None) -> PredictorModel:
    """Adam on per-step squared error. ``init`` continues from an existing model
    (fine-tuning); otherwise training starts from a fresh seeded model."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no training scenes")
    rng = np.random.default_rng([cfg.seed, 1])
    if val_scenes is None and cfg.val_fraction > 0 and len(scenes) >= 10:
        order = rng.permutation(len(scenes))
        n_val = max(1, int(round(cfg.val_fraction * len(scenes))))
        val_scenes = [scenes[i] for i in order[:n_val]]
        scenes = [scenes[i] for i in order[n_val:]]
    model = init.copy() if init is not None else PredictorModel(cfg)
    model.cfg = cfg
    opt = nn.AdamState.for_params(model.params, cfg.learning_rate)
    for epoch in range(cfg.epochs):
        opt.learning_rate = nn.cosine_lr(cfg.learning_rate, cfg.final_lr_fraction, epoch / max(cfg.epochs - 1, 1))
        order = rng.permutation(len(scenes))
        total, count = 0.0, 0
        for k in range(0, len(scenes), cfg.batch_size):
            batch = make_batch([scenes[i] for i in order[k:k + cfg.batch_size]])
            loss = _internal_loss(model, batch)
            grads = nn.backward(loss, model.params)
            info = nn.adam_step(model.params, grads, opt)
            if not info.accepted or not np.isfinite(float(loss.detach())):
                raise PredictorDivergenceError("predictor training diverged", {
                    "epoch": epoch, "step": opt.step_count, "loss": float(loss.detach()),
                    "grad_norm": info.grad_norm, "reason": info.reason})
            total += float(loss.detach()) * batch.size
            count += batch.size
        entry = {"epoch": epoch, "train_mse": total / count}
        if val_scenes:
            entry["val_rmse"] = normalized_rmse(model, val_scenes)
        model.history.append(entry)
        log.debug("predictor epoch %d %s", epoch, entry)
    return model


def normalized_rmse(model: PredictorModel, scenes: Sequence[PredictionScene]) -> float:
    """Mean per-step RMSE in each scene's own (normalised) coordinates."""
    pred = predict_many(model, scenes)
    fut = np.stack([s.target_future for s in scenes])
    return float(np.sqrt(((pred - fut) ** 2).sum(-1).mean(0)).mean())


# ---------------------------------------------------------------------------
# evaluation


def rmse_per_step(pred_m: np.ndarray, true_m: np.ndarray) -> np.ndarray:
    """sqrt(sum over the batch of squared Euclidean errors / batch size), per step."""
    if pred_m.shape != true_m.shape or pred_m.ndim != 3:
        raise ValueError(f"expected matching (BS, t_f, 2) arrays, got {pred_m.shape} and {true_m.shape}")
    if len(pred_m) == 0:
        raise ValueError("empty scene set")
    return np.sqrt(((pred_m - true_m) ** 2).sum(-1).sum(0) / len(pred_m))


@dataclass
class EvalReport:
    rmse_per_step: list[float]
    step_seconds: float
    batch_size: int
    task_id: str = ""
    model_id: str = ""
    horizons: list[float] = field(default_factory=lambda: list(HORIZONS_SECONDS))

    def horizon_rmse(self) -> dict[float, float]:
        out = {}
        for h in self.horizons:
            step = int(round(h / self.step_seconds))
            if 1 <= step <= len(self.rmse_per_step):
                out[h] = self.rmse_per_step[step - 1]
        return out

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse_per_step))

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "model_id": self.model_id, "batch_size": self.batch_size,
                "step_seconds": self.step_seconds, "rmse_per_step": self.rmse_per_step,
                "horizon_rmse": {f"{h:g}": v for h, v in self.horizon_rmse().items()},
                "mean_rmse": self.mean_rmse}


def evaluate_rmse(model: PredictorModel, scenes: Sequence[PredictionScene], step_seconds: float = 0.2,
                  task_id: str = "") -> EvalReport:
    """Per-step RMSE in metres after mapping predictions back with each scene's transform."""
    if not scenes:
        raise ValueError("empty scene set")
    pred = predict_many(model, scenes)
    scale = np.array([s.scale for s in scenes])[:, None, None]
    offset = np.stack([s.offset for s in scenes])[:, None, :]
    true = np.stack([s.target_future for s in scenes])
    curve = rmse_per_step(pred * scale + offset, true * scale + offset)
    return EvalReport([float(v) for v in curve], step_seconds, len(scenes), task_id, model.model_id)


def reports_to_csv(reports: dict[str, EvalReport]) -> str:
    """Rows are horizons in seconds, columns are the report keys."""
    keys = list(reports)
    horizons = sorted({h for r in reports.values() for h in r.horizon_rmse()})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["horizon_s"] + keys)
    for h in horizons:
        w.writerow([f"{h:g}"] + [f"{reports[k].horizon_rmse().get(h, float('nan')):.6f}" for k in keys])
    return buf.getvalue()


def curves_to_csv(reports: dict[str, EvalReport]) -> str:
    keys = list(reports)
    n = max(len(r.rmse_per_step) for r in reports.values())
    step = next(iter(reports.values())).step_seconds
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s"] + keys)
    for i in range(n):
        w.writerow([f"{(i + 1) * step:g}"] + [f"{reports[k].rmse_per_step[i]:.6f}" for k in keys])
    return buf.getvalue()


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
