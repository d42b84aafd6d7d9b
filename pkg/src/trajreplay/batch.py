"""Padded tensor batches of scenes for the recurrent models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import PredictionScene

N_LABELS = 9   # lane {-1,0,1} x slot {-1,0,1}; label + 4 indexes a one-hot


@dataclass
class SceneBatch:
    hist: torch.Tensor        # (B, V, t_h, 2), target in slot 0
    fut: torch.Tensor         # (B, t_f, 2)
    mask: torch.Tensor        # (B, V) bool
    labels: torch.Tensor      # (B, V) long, 0 where padded
    full: torch.Tensor | None = None   # (B, V, t, 2) when every scene has neighbour futures

    @property
    def size(self) -> int:
        return self.hist.shape[0]


def make_batch(scenes: Sequence[PredictionScene], slots: int | None = None, need_full: bool = False) -> SceneBatch:
    if not scenes:
        raise ValueError("empty batch")
    v = slots or max(s.n_vehicles for s in scenes)
    b = len(scenes)
    t_h, t_f = scenes[0].t_h, scenes[0].t_f
    hist = np.zeros((b, v, t_h, 2))
    fut = np.zeros((b, t_f, 2))
    mask = np.zeros((b, v), dtype=bool)
    labels = np.zeros((b, v), dtype=np.int64)
    have_full = all(s.neighbor_full is not None for s in scenes)
    if need_full and not have_full:
        raise ValueError("batch needs neighbour futures for every scene")
    full = np.zeros((b, v, t_h + t_f, 2)) if have_full else None
    for i, s in enumerate(scenes):
        n = s.n_vehicles
        if n > v:
            raise ValueError(f"scene has {n} vehicles, batch has {v} slots")
        hist[i, :n] = s.histories()
        fut[i] = s.target_future
        mask[i, :n] = True
        labels[i, :n] = s.position_labels
        if full is not None:
            full[i, :n] = s.all_full()
    return SceneBatch(
        torch.from_numpy(hist), torch.from_numpy(fut), torch.from_numpy(mask),
        torch.from_numpy(labels), None if full is None else torch.from_numpy(full))


def canonical_order(keys: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-scene vehicle order (B, V): valid rows first, then lexicographic by ``keys`` (B, V, D).

    Row results of a batched matmul can depend on the row's position, so
    feeding vehicles in a content-defined order makes any downstream
    pooling bitwise independent of how the caller ordered them.
    """
    k = keys.detach().reshape(keys.shape[0], keys.shape[1], -1).numpy()
    valid = mask.numpy()
    out = np.empty(valid.shape, dtype=np.int64)
    for b in range(len(k)):
        # lexsort keys: last row is the primary key
        out[b] = np.lexsort(np.vstack([k[b].T[::-1], ~valid[b]]))
    return torch.from_numpy(out)


def take_vehicles(x: torch.Tensor, order: torch.Tensor) -> torch.Tensor:
    """Reorder axis 1 of ``x`` per scene."""
    return x[torch.arange(x.shape[0])[:, None], order]


def one_hot_labels(labels: torch.Tensor) -> torch.Tensor:
    idx = (labels + N_LABELS // 2).clamp(0, N_LABELS - 1)
    return torch.nn.functional.one_hot(idx, N_LABELS).to(torch.float64)


def masked_mean_pool(x: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Mean over ``dim`` of the entries where ``mask`` is set.

    ``mask`` broadcasts against ``x`` up to ``dim``. Callers put vehicles in
    :func:`canonical_order` first, which makes the result independent of the
    input order bit for bit.
    """
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m.unsqueeze(-1)
    total = torch.where(m > 0, x, torch.zeros_like(x)).sum(dim=dim)
    count = m.sum(dim=dim).clamp(min=1.0)
    return total / count


def masked_sum_pool(x: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m.unsqueeze(-1)
    return torch.where(m > 0, x, torch.zeros_like(x)).sum(dim=dim)
