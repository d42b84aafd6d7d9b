"""Central finite-difference oracle, independent of autograd."""
from __future__ import annotations

import numpy as np
import torch

from trajreplay import nn


def fd_gradient(loss_fn, params: nn.ModelParams, eps: float = 1e-5) -> np.ndarray:
    base = params.flat()
    grad = np.zeros_like(base)
    with torch.no_grad():
        for i in range(base.size):
            v = base.copy()
            v[i] += eps
            params.set_flat(v)
            up = float(loss_fn())
            v[i] -= 2 * eps
            params.set_flat(v)
            down = float(loss_fn())
            grad[i] = (up - down) / (2 * eps)
    params.set_flat(base)
    return grad


def autograd_gradient(loss_fn, params: nn.ModelParams) -> np.ndarray:
    grads = nn.backward(loss_fn(), params)
    return np.concatenate([grads[k].detach().numpy().ravel() for k in params.names()])


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(loss_fn, params: nn.ModelParams, eps: float = 1e-5) -> float:
    return relative_error(autograd_gradient(loss_fn, params), fd_gradient(loss_fn, params, eps))
