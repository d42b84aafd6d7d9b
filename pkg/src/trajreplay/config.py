"""Dataclass configs from plain mappings and back."""
from __future__ import annotations

import typing
from dataclasses import asdict, fields, is_dataclass

import numpy as np


def from_dict(cls, d: dict | None):
    """Build dataclass ``cls`` from a mapping, recursing into nested dataclass fields.

    Unknown keys raise ``ValueError``; lists become tuples.
    """
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise TypeError(f"{cls.__name__} expects a mapping, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    hints = typing.get_type_hints(cls)
    kw = {}
    for k, v in d.items():
        hint = hints.get(k)
        if isinstance(hint, type) and is_dataclass(hint) and isinstance(v, dict):
            kw[k] = from_dict(hint, v)
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def plain(x):
    """JSON-ready copy of dataclasses, tuples and numpy scalars."""
    if is_dataclass(x) and not isinstance(x, type):
        return plain(asdict(x))
    if isinstance(x, dict):
        return {str(k): plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; values in ``override`` win."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out
