"""Fixed-size condition vectors from variable-size scenes.

Pairwise affinities use a time-decayed mean distance over the history,
``a_ij = exp(-sum_k w_k d_k(i, j) / sum_k w_k)`` with ``w_k = lambda**(t_h - k)``.
The top eigenvectors of the resulting graph Laplacian, zero padded to
``n_v`` slots, are appended to the flattened target history.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PredictionScene, SceneConfig

TIE_TOL = 1e-9


class InsufficientSceneError(ValueError):
    pass


@dataclass
class LaplacianFeatures:
    adjacency: np.ndarray     # (v, v)
    degree: np.ndarray        # (v, v) diagonal
    laplacian: np.ndarray     # (v, v)
    eigenvalues: np.ndarray   # (v,) descending
    eigenvectors: np.ndarray  # (n_v, n_v) columns, zero padded
    n_vehicles: int


def time_weights(t_h: int, decay: float) -> np.ndarray:
    k = np.arange(1, t_h + 1)
    return decay ** (t_h - k)


def adjacency_matrix(histories: np.ndarray, decay: float) -> np.ndarray:
    """Affinities of ``histories`` (v, t_h, 2); zero diagonal."""
    v, t_h, _ = histories.shape
    w = time_weights(t_h, decay)
    diff = histories[:, None, :, :] - histories[None, :, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))                    # (v, v, t_h)
    a = np.exp(-(dist * w).sum(-1) / w.sum())
    np.fill_diagonal(a, 0.0)
    return a


def canonical_sign(vec: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive (first one on ties)."""
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def _order_eigenpairs(vals: np.ndarray, vecs: np.ndarray):
    # descending eigenvalue; within a numerically tied group, lexicographically
    # largest canonical vector first
    cols = [canonical_sign(vecs[:, i]) for i in range(vecs.shape[1])]
    order = sorted(range(len(vals)), key=lambda i: -vals[i])
    out = []
    i = 0
    while i < len(order):
        j = i + 1
        while j < len(order) and abs(vals[order[j]] - vals[order[i]]) <= TIE_TOL * max(1.0, abs(vals[order[i]])):
            j += 1
        group = sorted(order[i:j], key=lambda c: tuple(cols[c]), reverse=True)
        out.extend(group)
        i = j
    return vals[out], np.stack([cols[c] for c in out], axis=1)


def laplacian_features(scene: PredictionScene, cfg: SceneConfig) -> LaplacianFeatures:
    hist = scene.histories()[:cfg.n_v]
    v = hist.shape[0]
    if v < 2:
        raise InsufficientSceneError("need at least two vehicles")
    a = adjacency_matrix(hist, cfg.decay_lambda)
    d = np.diag(a.sum(axis=1))
    lap = d - a
    vals, vecs = np.linalg.eigh(lap)
    vals, vecs = _order_eigenpairs(vals, vecs)
    padded = np.zeros((cfg.n_v, cfg.n_v))
    padded[:v, :v] = vecs
    return LaplacianFeatures(a, d, lap, vals, padded, v)


def condition_vector(scene: PredictionScene, feats: LaplacianFeatures, cfg: SceneConfig) -> np.ndarray:
    """Flattened target history followed by the top ``eig_k`` eigenvectors;
    length ``2*t_h + eig_k*n_v`` regardless of the vehicle count."""
    hist = scene.target_history.reshape(-1)
    eig = feats.eigenvectors[:, :cfg.eig_k]
    return np.concatenate([hist, eig.T.reshape(-1)])


def scene_condition(scene: PredictionScene, cfg: SceneConfig) -> np.ndarray:
    return condition_vector(scene, laplacian_features(scene, cfg), cfg)


def condition_layout(cfg: SceneConfig) -> dict:
    return {
        "dim": cfg.condition_dim,
        "blocks": [
            {"name": "target_history", "start": 0, "length": 2 * cfg.t_h, "order": "x1,y1,x2,y2,..."},
            {"name": "eigenvectors", "start": 2 * cfg.t_h, "length": cfg.eig_k * cfg.n_v,
             "order": "v1[slot 1..n_v], v2[...], ... by descending eigenvalue"},
        ],
    }
