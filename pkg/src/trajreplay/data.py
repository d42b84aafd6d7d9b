"""Trajectory corpora, scene extraction and scene normalisation.

Corpus files are delimited text with a ``vehicle_id,frame,x,y`` header.
Lines starting with ``#`` are comments; ``# rate_hz=10`` records the
sampling rate. Scenes are written as line-JSON archives: a header line with
the scene configuration, then one scene per line.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ARCHIVE_FORMAT = "trajreplay-scenes"
ARCHIVE_VERSION = 1


class CorpusParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class CorpusValidationError(ValueError):
    def __init__(self, vehicle_id: int, msg: str):
        super().__init__(f"vehicle {vehicle_id}: {msg}")
        self.vehicle_id = vehicle_id


class UnsupportedRateError(ValueError):
    pass


class DegenerateSceneError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: int
    frame: int
    x: float
    y: float


class Corpus(list):
    """List of records sorted by (vehicle_id, frame), plus its sampling rate."""

    def __init__(self, records: Iterable[TrajectoryRecord] = (), rate_hz: float | None = None, source: str = ""):
        super().__init__(records)
        self.rate_hz = rate_hz
        self.source = source

    @property
    def vehicle_ids(self) -> list[int]:
        return sorted({r.vehicle_id for r in self})


@dataclass(frozen=True)
class SceneConfig:
    t_h: int = 16
    t_f: int = 25
    step_seconds: float = 0.2
    n_v: int = 5
    decay_lambda: float = 0.9
    eig_k: int = 3
    lane_width: float = 3.5
    beside_gap: float = 5.0
    # keep only scenes whose vehicle count is within [min, max]; None = no filter
    min_vehicles: int | None = None
    max_vehicles: int | None = None

    def __post_init__(self):
        if self.t_h < 2:
            raise ConfigError("t_h must be >= 2")
        if self.t_f < 1:
            raise ConfigError("t_f must be >= 1")
        if self.step_seconds <= 0:
            raise ConfigError("step_seconds must be positive")
        if not 1 <= self.eig_k <= self.n_v:
            raise ConfigError("need 1 <= eig_k <= n_v")
        if not 0.0 < self.decay_lambda <= 1.0:
            raise ConfigError("decay_lambda must be in (0, 1]")

    @property
    def t(self) -> int:
        return self.t_h + self.t_f

    @property
    def rate_hz(self) -> float:
        return 1.0 / self.step_seconds

    @property
    def condition_dim(self) -> int:
        return 2 * self.t_h + self.eig_k * self.n_v

    @property
    def future_dim(self) -> int:
        return 2 * self.t_f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PredictionScene:
    """One prediction item on a shared time grid.

    Coordinates are stored in the scene's current frame; ``offset`` and
    ``scale`` map them back to the source frame: ``source = coords*scale + offset``.
    """

    target_history: np.ndarray          # (t_h, 2)
    target_future: np.ndarray           # (t_f, 2)
    neighbor_histories: np.ndarray      # (n, t_h, 2)
    position_labels: np.ndarray         # (n + 1,), target first
    neighbor_full: np.ndarray | None = None   # (n, t_h + t_f, 2)
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.target_history = np.asarray(self.target_history, dtype=np.float64).reshape(-1, 2)
        self.target_future = np.asarray(self.target_future, dtype=np.float64).reshape(-1, 2)
        t_h = self.target_history.shape[0]
        nb = np.asarray(self.neighbor_histories, dtype=np.float64)
        self.neighbor_histories = nb.reshape(-1, t_h, 2)
        self.position_labels = np.asarray(self.position_labels, dtype=np.int64).reshape(-1)
        if self.neighbor_full is not None:
            self.neighbor_full = np.asarray(self.neighbor_full, dtype=np.float64).reshape(
                self.neighbor_histories.shape[0], -1, 2)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(2)
        self.scale = float(self.scale)

    @property
    def t_h(self) -> int:
        return self.target_history.shape[0]

    @property
    def t_f(self) -> int:
        return self.target_future.shape[0]

    @property
    def n_neighbors(self) -> int:
        return self.neighbor_histories.shape[0]

    @property
    def n_vehicles(self) -> int:
        return 1 + self.n_neighbors

    def target_full(self) -> np.ndarray:
        return np.concatenate([self.target_history, self.target_future], axis=0)

    def histories(self) -> np.ndarray:
        """All vehicles' histories, target first: (n_vehicles, t_h, 2)."""
        return np.concatenate([self.target_history[None], self.neighbor_histories], axis=0)

    def all_full(self) -> np.ndarray:
        """Full sequences of all vehicles, target first. Needs ``neighbor_full``."""
        if self.neighbor_full is None:
            raise ValueError("scene has no neighbor futures")
        return np.concatenate([self.target_full()[None], self.neighbor_full], axis=0)

    def coordinate_blocks(self) -> list[np.ndarray]:
        blocks = [self.target_history, self.target_future, self.neighbor_histories.reshape(-1, 2)]
        if self.neighbor_full is not None:
            blocks.append(self.neighbor_full.reshape(-1, 2))
        return blocks

    def validate(self) -> None:
        if len(self.position_labels) != self.n_vehicles:
            raise ValueError("one position label per vehicle required")
        if self.position_labels[0] != 0:
            raise ValueError("target position label must be 0")
        if self.neighbor_full is not None and self.neighbor_full.shape[1] != self.t_h + self.t_f:
            raise ValueError("neighbor_full must span history and future")
        for b in self.coordinate_blocks():
            if not np.isfinite(b).all():
                raise ValueError("non-finite coordinates")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def with_transform(self, fn) -> "PredictionScene":
        """Apply ``fn`` to every coordinate array (transform bookkeeping unchanged)."""
        return replace(
            self,
            target_history=fn(self.target_history),
            target_future=fn(self.target_future),
            neighbor_histories=fn(self.neighbor_histories),
            neighbor_full=None if self.neighbor_full is None else fn(self.neighbor_full),
            meta=dict(self.meta),
        )


# ---------------------------------------------------------------------------
# corpus IO


def load_corpus(path: str | Path, cfg: SceneConfig | None = None, rate_hz: float | None = None) -> Corpus:
    """Read a ``vehicle_id,frame,x,y`` file into a sorted, validated corpus."""
    path = Path(path)
    records = []
    file_rate = None
    with open(path, newline="") as fh:
        header = None
        for line_no, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if body.startswith("rate_hz="):
                    try:
                        file_rate = float(body.split("=", 1)[1])
                    except ValueError:
                        raise CorpusParseError(path, line_no, f"bad rate comment {s!r}") from None
                continue
            row = next(csv.reader([s]))
            row = [c.strip() for c in row]
            if header is None:
                if row[:4] != ["vehicle_id", "frame", "x", "y"]:
                    raise CorpusParseError(path, line_no, "header must be vehicle_id,frame,x,y")
                header = row
                continue
            if len(row) != len(header):
                raise CorpusParseError(path, line_no, f"expected {len(header)} fields, got {len(row)}")
            try:
                vid, frame = int(row[0]), int(row[1])
                x, y = float(row[2]), float(row[3])
            except ValueError as e:
                raise CorpusParseError(path, line_no, str(e)) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise CorpusParseError(path, line_no, "non-finite coordinate")
            records.append(TrajectoryRecord(vid, frame, x, y))
    if rate_hz is None:
        rate_hz = file_rate if file_rate is not None else (cfg.rate_hz if cfg else None)
    corpus = Corpus(sorted(records, key=lambda r: (r.vehicle_id, r.frame)), rate_hz=rate_hz, source=str(path))
    validate_records(corpus)
    return corpus


def validate_records(records: Sequence[TrajectoryRecord]) -> None:
    last: dict[int, int] = {}
    for r in sorted(records, key=lambda r: (r.vehicle_id, r.frame)):
        prev = last.get(r.vehicle_id)
        if prev is not None and r.frame <= prev:
            raise CorpusValidationError(r.vehicle_id, f"frame {r.frame} repeated or out of order")
        last[r.vehicle_id] = r.frame
        if not (math.isfinite(r.x) and math.isfinite(r.y)):
            raise CorpusValidationError(r.vehicle_id, f"non-finite coordinate at frame {r.frame}")


def write_corpus(path: str | Path, records: Sequence[TrajectoryRecord], rate_hz: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if rate_hz is not None:
            fh.write(f"# rate_hz={rate_hz:g}\n")
        fh.write("vehicle_id,frame,x,y\n")
        for r in records:
            fh.write(f"{r.vehicle_id},{r.frame},{r.x!r},{r.y!r}\n")


def resample(records: Sequence[TrajectoryRecord], from_hz: float, to_hz: float) -> Corpus:
    """Keep every k-th frame (k = from_hz/to_hz) on a corpus-wide grid and renumber."""
    ratio = Fraction(from_hz).limit_denominator(10_000) / Fraction(to_hz).limit_denominator(10_000)
    if ratio.denominator != 1 or ratio < 1:
        raise UnsupportedRateError(f"cannot resample {from_hz} Hz to {to_hz} Hz (ratio {float(ratio):g})")
    k = ratio.numerator
    if not records:
        return Corpus([], rate_hz=to_hz)
    f0 = min(r.frame for r in records)
    out = [TrajectoryRecord(r.vehicle_id, (r.frame - f0) // k, r.x, r.y)
           for r in records if (r.frame - f0) % k == 0]
    out.sort(key=lambda r: (r.vehicle_id, r.frame))
    return Corpus(out, rate_hz=to_hz, source=getattr(records, "source", ""))


# ---------------------------------------------------------------------------
# scene extraction


def position_labels(positions: np.ndarray, heading: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Lane/slot labels of each vehicle relative to the target (row 0).

    ``label = lane + 3*lon`` with lane in {-1 left, 0 same, +1 right} and lon in
    {-1 behind, 0 beside, +1 ahead}; the target is 0 and the left lane
    alongside is -1.
    """
    hx, hy = heading
    rel = positions - positions[0]
    lon = rel[:, 0] * hx + rel[:, 1] * hy
    lat = -rel[:, 0] * hy + rel[:, 1] * hx   # positive = left of heading
    lane = -np.clip(np.rint(lat / cfg.lane_width), -1, 1)
    slot = np.where(lon > cfg.beside_gap, 1, np.where(lon < -cfg.beside_gap, -1, 0))
    labels = (lane + 3 * slot).astype(np.int64)
    labels[0] = 0
    return labels


def heading_of(track: np.ndarray) -> np.ndarray:
    d = track[-1] - track[0]
    n = float(np.hypot(*d))
    return np.array([1.0, 0.0]) if n < 1e-9 else d / n


@dataclass
class _Track:
    frames: np.ndarray
    xy: np.ndarray

    def window(self, start: int, length: int) -> np.ndarray | None:
        i = int(np.searchsorted(self.frames, start))
        j = i + length - 1
        if j >= len(self.frames) or self.frames[i] != start or self.frames[j] != start + length - 1:
            return None
        return self.xy[i:j + 1]

    def at(self, frame: int) -> np.ndarray | None:
        i = int(np.searchsorted(self.frames, frame))
        if i < len(self.frames) and self.frames[i] == frame:
            return self.xy[i]
        return None


def _tracks(records: Sequence[TrajectoryRecord]) -> dict[int, _Track]:
    grouped: dict[int, list[TrajectoryRecord]] = defaultdict(list)
    for r in records:
        grouped[r.vehicle_id].append(r)
    out = {}
    for vid, rs in grouped.items():
        rs.sort(key=lambda r: r.frame)
        out[vid] = _Track(np.array([r.frame for r in rs], dtype=np.int64),
                          np.array([[r.x, r.y] for r in rs], dtype=np.float64))
    return out


def extract_scenes(records: Sequence[TrajectoryRecord], cfg: SceneConfig, stride: int = 1,
                   source: str = "") -> list[PredictionScene]:
    """One scene per (target vehicle, anchor frame) with full history and future.

    The anchor is the last history step. Neighbours are the closest vehicles at
    the anchor that cover the whole history window (ties by vehicle id), at
    most ``n_v - 1``. Scenes without neighbours are dropped.
    """
    tracks = _tracks(records)
    by_frame: dict[int, list[int]] = defaultdict(list)
    for vid in sorted(tracks):
        for f in tracks[vid].frames:
            by_frame[int(f)].append(vid)
    scenes = []
    for vid in sorted(tracks):
        tr = tracks[vid]
        if len(tr.frames) < cfg.t:
            continue
        first, last = int(tr.frames[0]), int(tr.frames[-1])
        for anchor in range(first + cfg.t_h - 1, last - cfg.t_f + 1, stride):
            start = anchor - cfg.t_h + 1
            full = tr.window(start, cfg.t)
            if full is None:
                continue
            here = full[cfg.t_h - 1]
            cands = []
            for other in by_frame[anchor]:
                if other == vid:
                    continue
                hist = tracks[other].window(start, cfg.t_h)
                if hist is None:
                    continue
                d = float(np.hypot(*(tracks[other].at(anchor) - here)))
                cands.append((d, other, hist))
            if not cands:
                continue
            cands.sort(key=lambda c: (c[0], c[1]))
            chosen = cands[:cfg.n_v - 1]
            n_veh = 1 + len(chosen)
            if cfg.min_vehicles is not None and n_veh < cfg.min_vehicles:
                continue
            if cfg.max_vehicles is not None and n_veh > cfg.max_vehicles:
                continue
            fulls = [tracks[o].window(start, cfg.t) for _, o, _ in chosen]
            nb_full = np.stack(fulls) if all(f is not None for f in fulls) else None
            nb_hist = np.stack([h for _, _, h in chosen])
            starts = np.concatenate([full[:1], nb_hist[:, 0]], axis=0)
            labels = position_labels(starts, heading_of(full[:cfg.t_h]), cfg)
            scenes.append(PredictionScene(
                target_history=full[:cfg.t_h].copy(),
                target_future=full[cfg.t_h:].copy(),
                neighbor_histories=nb_hist.copy(),
                neighbor_full=None if nb_full is None else nb_full.copy(),
                position_labels=labels,
                meta={"source": source, "target_id": vid, "anchor_frame": anchor,
                      "neighbor_ids": [o for _, o, _ in chosen]},
            ))
    return scenes


# ---------------------------------------------------------------------------
# normalisation


def center_scene(scene: PredictionScene) -> PredictionScene:
    """Translate so the target sits at the origin at the last history step."""
    shift = scene.target_history[-1].copy()
    out = scene.with_transform(lambda a: a - shift)
    out.offset = scene.offset + scene.scale * shift
    out.scale = scene.scale
    return out


def normalize_scene(scene: PredictionScene) -> PredictionScene:
    """Centre on the target's last history position, then divide by the
    largest absolute coordinate over every sequence the scene holds."""
    centered = center_scene(scene)
    m = max(float(np.abs(b).max()) if b.size else 0.0 for b in centered.coordinate_blocks())
    if m == 0.0:
        raise DegenerateSceneError("all coordinates are zero after centering")
    out = centered.with_transform(lambda a: a / m)
    out.offset = centered.offset
    out.scale = centered.scale * m
    return out


def denormalize_scene(scene: PredictionScene) -> PredictionScene:
    out = scene.with_transform(lambda a: a * scene.scale + scene.offset)
    out.offset = np.zeros(2)
    out.scale = 1.0
    return out


def to_source_frame(coords: np.ndarray, scene: PredictionScene) -> np.ndarray:
    return np.asarray(coords) * scene.scale + scene.offset


# ---------------------------------------------------------------------------
# scene archives


def _scene_to_json(s: PredictionScene) -> dict:
    d = {
        "target_history": s.target_history.tolist(),
        "target_future": s.target_future.tolist(),
        "neighbor_histories": s.neighbor_histories.tolist(),
        "position_labels": s.position_labels.tolist(),
        "offset": s.offset.tolist(),
        "scale": s.scale,
        "meta": s.meta,
    }
    if s.neighbor_full is not None:
        d["neighbor_full"] = s.neighbor_full.tolist()
    return d


def _scene_from_json(d: dict) -> PredictionScene:
    t_h = len(d["target_history"])
    nb = np.asarray(d["neighbor_histories"], dtype=np.float64).reshape(-1, t_h, 2)
    return PredictionScene(
        target_history=d["target_history"],
        target_future=d["target_future"],
        neighbor_histories=nb,
        position_labels=d["position_labels"],
        neighbor_full=d.get("neighbor_full"),
        offset=d.get("offset", [0.0, 0.0]),
        scale=d.get("scale", 1.0),
        meta=d.get("meta", {}),
    )


def write_scene_archive(path: str | Path, scenes: Sequence[PredictionScene], cfg: SceneConfig,
                        extra: dict | None = None) -> None:
    header = {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION, "scene_config": cfg.to_dict(),
              "count": len(scenes)}
    if extra:
        header.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in scenes:
            fh.write(json.dumps(_scene_to_json(s), sort_keys=True) + "\n")


def read_scene_archive(path: str | Path) -> tuple[dict, list[PredictionScene]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise ValueError(f"{path}: missing archive header") from None
        if header.get("format") != ARCHIVE_FORMAT:
            raise ValueError(f"{path}: not a scene archive")
        scenes = [_scene_from_json(json.loads(line)) for line in fh if line.strip()]
    if header.get("count") not in (None, len(scenes)):
        raise ValueError(f"{path}: header count {header['count']} != {len(scenes)} scenes")
    return header, scenes


def split_scenes(scenes: Sequence[PredictionScene], fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffle deterministically and split (train/val/test by default 7:1:2)."""
    idx = np.random.default_rng(seed).permutation(len(scenes))
    bounds = np.cumsum([int(round(f * len(scenes))) for f in fractions[:-1]])
    parts = np.split(idx, bounds)
    return [[scenes[i] for i in p] for p in parts]
