"""Small differentiable substrate shared by every learned model.

Parameters live in :class:`ModelParams`, a flat store of named float64 blocks.
Layers are plain functions of ``(params, block_name, input)`` so models stay
as data and can be checkpointed, copied and compared block by block. Reverse
mode gradients come from torch autograd; the optimizer is a hand-rolled Adam
over the same named blocks.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

DTYPE = torch.float64
CHECKPOINT_FORMAT = "trajreplay-params"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Input shape does not match the configuration of a parameter block."""


class AbsentGradientWarning(UserWarning):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class ModelParams:
    """Named parameter blocks with a global flat view.

    Block names are unique and shapes are fixed once a block is added.
    ``sub(prefix)`` returns a view that shares the underlying tensors.
    """

    def __init__(self, blocks: dict[str, torch.Tensor] | None = None):
        self._blocks: dict[str, torch.Tensor] = {}
        for name, value in (blocks or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._blocks:
            raise KeyError(f"duplicate parameter block {name!r}")
        t = as_tensor(value).detach().clone().requires_grad_(True)
        self._blocks[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._blocks[name]
        except KeyError:
            raise KeyError(f"no parameter block {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def names(self) -> list[str]:
        return list(self._blocks)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._blocks.values())

    def items(self):
        return self._blocks.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._blocks.items()}

    @property
    def size(self) -> int:
        return sum(v.numel() for v in self._blocks.values())

    def sub(self, prefix: str) -> "ModelParams":
        view = ModelParams()
        p = prefix + "."
        for k, v in self._blocks.items():
            if k.startswith(p):
                view._blocks[k[len(p):]] = v
        return view

    def flat(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0)
        return np.concatenate([v.detach().numpy().ravel() for v in self._blocks.values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise DimensionError(f"flat vector has {vec.size} entries, expected {self.size}")
        i = 0
        with torch.no_grad():
            for v in self._blocks.values():
                n = v.numel()
                v.copy_(torch.from_numpy(vec[i:i + n].reshape(v.shape)))
                i += n

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.detach().clone() for k, v in self._blocks.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._blocks.items()}

    def zero_(self) -> "ModelParams":
        with torch.no_grad():
            for v in self._blocks.values():
                v.zero_()
        return self

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self._blocks.values())

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self._blocks.items():
            h.update(k.encode())
            h.update(v.detach().numpy().tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# initialisation


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def init_fc(params: ModelParams, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    params.add(f"{name}.weight", _glorot(rng, n_in, n_out))
    params.add(f"{name}.bias", np.zeros(n_out))


def init_mlp(params: ModelParams, name: str, sizes: Iterable[int], rng: np.random.Generator) -> None:
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least an input and an output size")
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_fc(params, f"{name}.{i}", a, b, rng)


def _init_recurrent(params, name, n_in, n_hidden, n_gates, rng):
    bound = 1.0 / math.sqrt(n_hidden)
    params.add(f"{name}.w_ih", rng.uniform(-bound, bound, size=(n_in, n_gates * n_hidden)))
    params.add(f"{name}.w_hh", rng.uniform(-bound, bound, size=(n_hidden, n_gates * n_hidden)))
    params.add(f"{name}.b_ih", np.zeros(n_gates * n_hidden))
    params.add(f"{name}.b_hh", np.zeros(n_gates * n_hidden))


def init_gru(params: ModelParams, name: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    _init_recurrent(params, name, n_in, n_hidden, 3, rng)


def init_lstm(params: ModelParams, name: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    _init_recurrent(params, name, n_in, n_hidden, 4, rng)


def init_bigru(params: ModelParams, name: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    init_gru(params, f"{name}.fwd", n_in, n_hidden, rng)
    init_gru(params, f"{name}.bwd", n_in, n_hidden, rng)


# ---------------------------------------------------------------------------
# forward passes

ACTIVATIONS = {
    "elu": torch.nn.functional.elu,
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "none": lambda x: x,
}


def forward_fc(params: ModelParams, name: str, x: torch.Tensor) -> torch.Tensor:
    w = params[f"{name}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"block {name!r} expects last dim {w.shape[0]}, got {tuple(x.shape)}")
    return x @ w + params[f"{name}.bias"]


def mlp_depth(params: ModelParams, name: str) -> int:
    n = 0
    while f"{name}.{n}.weight" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no MLP block {name!r}")
    return n


def forward_mlp(
    params: ModelParams,
    name: str,
    x: torch.Tensor,
    activation: str = "elu",
    out_activation: str | None = None,
) -> torch.Tensor:
    """Stack of FC layers. Hidden layers use ``activation``; the last layer uses
    ``out_activation`` (defaults to ``activation``)."""
    act = ACTIVATIONS[activation]
    out_act = ACTIVATIONS[out_activation or activation]
    depth = mlp_depth(params, name)
    for i in range(depth):
        x = forward_fc(params, f"{name}.{i}", x)
        x = act(x) if i < depth - 1 else out_act(x)
    return x


def _check_recurrent_input(params, name, x):
    w = params[f"{name}.w_ih"]
    if x.dim() != 3 or x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"block {name!r} expects (batch, time, {w.shape[0]}), got {tuple(x.shape)}")
    return w.shape[1]


def gru_cell(params: ModelParams, name: str, x_t: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    return _gru_update(params, name, x_t @ params[f"{name}.w_ih"] + params[f"{name}.b_ih"], h)


def _gru_update(params: ModelParams, name: str, gi: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    # gi: input projection x_t @ w_ih + b_ih, precomputable for a whole sequence
    gh = h @ params[f"{name}.w_hh"] + params[f"{name}.b_hh"]
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


def forward_gru(
    params: ModelParams, name: str, x: torch.Tensor, h0: torch.Tensor | None = None,
    reverse: bool = False,
) -> torch.Tensor:
    """Run a GRU over ``x`` of shape (batch, time, features).

    Returns the hidden sequence (batch, time, hidden) aligned with the input
    time index, also when ``reverse`` is set.
    """
    hidden = _check_recurrent_input(params, name, x) // 3
    h = x.new_zeros(x.shape[0], hidden) if h0 is None else h0
    steps = range(x.shape[1] - 1, -1, -1) if reverse else range(x.shape[1])
    gi = x @ params[f"{name}.w_ih"] + params[f"{name}.b_ih"]
    out = [None] * x.shape[1]
    for t in steps:
        h = _gru_update(params, name, gi[:, t], h)
        out[t] = h
    return torch.stack(out, dim=1)


def forward_bigru(
    params: ModelParams, name: str, x: torch.Tensor,
    h0_fwd: torch.Tensor | None = None, h0_bwd: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bidirectional GRU; forward and backward sequences are returned separately."""
    fwd = forward_gru(params, f"{name}.fwd", x, h0_fwd)
    bwd = forward_gru(params, f"{name}.bwd", x, h0_bwd, reverse=True)
    return fwd, bwd


def lstm_cell(params: ModelParams, name: str, x_t, h, c):
    return _lstm_update(params, name, x_t @ params[f"{name}.w_ih"] + params[f"{name}.b_ih"], h, c)


def _lstm_update(params: ModelParams, name: str, gi, h, c):
    g = gi + h @ params[f"{name}.w_hh"] + params[f"{name}.b_hh"]
    i, f, gg, o = g.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(gg)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def forward_lstm(
    params: ModelParams, name: str, x: torch.Tensor,
    state: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    hidden = _check_recurrent_input(params, name, x) // 4
    if state is None:
        h = x.new_zeros(x.shape[0], hidden)
        c = x.new_zeros(x.shape[0], hidden)
    else:
        h, c = state
    gi = x @ params[f"{name}.w_ih"] + params[f"{name}.b_ih"]
    out = []
    for t in range(x.shape[1]):
        h, c = _lstm_update(params, name, gi[:, t], h, c)
        out.append(h)
    return torch.stack(out, dim=1), (h, c)


# ---------------------------------------------------------------------------
# gradients


def backward(loss: torch.Tensor, params: ModelParams, retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every block of ``params``.

    Blocks that the loss does not depend on get a zero gradient and an
    :class:`AbsentGradientWarning`.
    """
    if loss.dim() != 0:
        raise DimensionError("backward needs a scalar loss")
    names = params.names()
    grads = torch.autograd.grad(loss, params.tensors(), allow_unused=True, retain_graph=retain_graph)
    out = {}
    missing = []
    for name, g, p in zip(names, grads, params.tensors()):
        if g is None:
            missing.append(name)
            g = torch.zeros_like(p)
        out[name] = g.detach()
    if missing:
        warnings.warn(f"no gradient path to blocks: {', '.join(missing)}", AbsentGradientWarning, stacklevel=2)
    return out


def grad_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


# ---------------------------------------------------------------------------
# Adam


def cosine_lr(base: float, final_fraction: float, progress: float) -> float:
    """Cosine decay from ``base`` at progress 0 to ``base * final_fraction`` at 1."""
    return base * (final_fraction + (1 - final_fraction) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float = 1e-3, **kw) -> "AdamState":
        st = cls(learning_rate=learning_rate, **kw)
        for k, v in params.items():
            st.first_moment[k] = torch.zeros_like(v, requires_grad=False)
            st.second_moment[k] = torch.zeros_like(v, requires_grad=False)
        return st


@dataclass
class AdamStepInfo:
    accepted: bool
    grad_norm: float
    reason: str | None = None


def adam_step(params: ModelParams, grads: dict[str, torch.Tensor], state: AdamState) -> AdamStepInfo:
    """One bias-corrected Adam update, in place.

    Non-finite gradients reject the whole update; params and state are then
    left untouched and the returned info says why.
    """
    bad = [k for k, g in grads.items() if not bool(torch.isfinite(g).all())]
    gn = grad_norm(grads) if not bad else float("nan")
    if bad:
        return AdamStepInfo(False, gn, f"non-finite gradient in {', '.join(bad)}")
    if set(grads) != set(params.names()):
        raise DimensionError("gradient blocks do not match parameter blocks")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = state.first_moment[k]
            v = state.second_moment[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(state.learning_rate * (m / c1) / ((v / c2).sqrt() + state.epsilon))
    return AdamStepInfo(True, gn)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, config: dict | None = None, seed: int | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "blocks": [[k, list(s)] for k, s in params.shapes().items()],
        "config": config or {},
        "seed": seed,
    }
    arrays = {f"p:{k}": v for k, v in params.arrays().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a parameter checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = ModelParams()
        for name, shape in header["blocks"]:
            arr = z[f"p:{name}"]
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: block {name} has shape {arr.shape}, header says {shape}")
            params.add(name, arr)
    return params, header
