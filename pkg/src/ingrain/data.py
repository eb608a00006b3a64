"""Mobility records, fixed-length trajectory windows, masks and splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CSV_HEADER = ("user_id", "timestamp", "lat", "lon")
SAMPLE_INTERVAL_S = 60
SYNTH_EPOCH = 1_230_768_000  # 2009-01-01 UTC


class DataFormatError(ValueError):
    """A record file does not conform to the CSV interface."""


@dataclass(frozen=True)
class RawRecord:
    user_id: str
    timestamp: int
    lat: float
    lon: float

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass
class TrajectoryWindow:
    """``L`` consecutive points of one user plus the point that follows them.

    ``points`` is ``L x 2`` in (lat, lon) order, ``frames`` are ordinal time
    frames and ``mask`` is True where the point is observed.
    """

    user_id: str
    window_index: int
    points: np.ndarray
    frames: np.ndarray
    target: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(2)
        if self.mask is None:
            self.mask = np.ones(len(self.points), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = len(self.points)
        if len(self.frames) != n or len(self.mask) != n:
            raise ValueError(
                f"points/frames/mask lengths differ: {n}, {len(self.frames)}, {len(self.mask)}"
            )
        if n > 1 and np.any(np.diff(self.frames) <= 0):
            raise ValueError("frames must be strictly increasing")

    @property
    def length(self) -> int:
        return len(self.points)

    @property
    def missing_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def observed_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def with_mask(self, mask) -> "TrajectoryWindow":
        return replace(self, mask=np.asarray(mask, dtype=bool).copy())


@dataclass(frozen=True)
class MaskSpec:
    missing_rate: float
    distribution: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(
                f"missing_rate must lie in [0, 1) so one point stays observed, got {self.missing_rate}"
            )
        if self.distribution not in ("uniform", "poisson"):
            raise ValueError(f"unknown mask distribution {self.distribution!r}")


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def load_records(path) -> dict[str, list[RawRecord]]:
    """Read a ``user_id,timestamp,lat,lon`` CSV into per-user, time-ordered sequences.

    Duplicate (user, timestamp) pairs keep their first occurrence in file order.
    """
    path = Path(path)
    users: dict[str, dict[int, RawRecord]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                rec = RawRecord(row[0], int(row[1]), float(row[2]), float(row[3]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(rec.lat) and math.isfinite(rec.lon)):
                raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
            users.setdefault(rec.user_id, {}).setdefault(rec.timestamp, rec)
    return {
        uid: [recs[t] for t in sorted(recs)]
        for uid, recs in users.items()
    }


def write_records(records: Sequence[RawRecord], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.user_id, r.timestamp, repr(r.lat), repr(r.lon)])
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def windowize(sequence: Sequence[RawRecord], L: int, stride: int | None = None) -> list[TrajectoryWindow]:
    """Cut segments of ``L + 1`` records; the last record of each segment is the target."""
    if L < 2:
        raise ValueError(f"window length must be >= 2, got {L}")
    stride = L if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = []
    coords = np.array([[r.lat, r.lon] for r in sequence], dtype=np.float64).reshape(-1, 2)
    frames = np.arange(L)
    for w, start in enumerate(range(0, len(sequence) - L, stride)):
        seg = coords[start : start + L + 1]
        out.append(
            TrajectoryWindow(
                user_id=sequence[start].user_id,
                window_index=w,
                points=seg[:L].copy(),
                frames=frames.copy(),
                target=seg[L].copy(),
            )
        )
    return out


def windowize_all(users: dict[str, list[RawRecord]], L: int, stride: int | None = None) -> list[TrajectoryWindow]:
    out = []
    for uid in sorted(users):
        out.extend(windowize(users[uid], L, stride))
    return out


# ---------------------------------------------------------------------------
# Masks and splits
# ---------------------------------------------------------------------------


def generate_mask(L: int, spec: MaskSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Boolean mask of length ``L`` (True = observed) with at least one observed point.

    Draws from ``rng`` when given, otherwise from a generator seeded by ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if spec.distribution == "uniform":
        missing = rng.random(L) < spec.missing_rate
    else:
        count = int(min(max(rng.poisson(spec.missing_rate * L), 0), L - 1))
        missing = np.zeros(L, dtype=bool)
        missing[rng.choice(L, size=count, replace=False)] = True
    if missing.all():
        missing[rng.integers(L)] = False
    return ~missing


def generate_masks(count: int, L: int, spec: MaskSpec) -> list[np.ndarray]:
    """``count`` masks from one stream seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    return [generate_mask(L, spec, rng) for _ in range(count)]


def apply_masks(windows: Sequence[TrajectoryWindow], spec: MaskSpec) -> list[TrajectoryWindow]:
    masks = generate_masks(len(windows), windows[0].length if windows else 0, spec)
    return [w.with_mask(m) for w, m in zip(windows, masks)]


def split(dataset: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(math.floor(train_fraction * len(dataset)))
    return [dataset[i] for i in perm[:cut]], [dataset[i] for i in perm[cut:]]


# ---------------------------------------------------------------------------
# Synthetic trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthProfile:
    walker_count: int
    points_per_walker: int
    motion: str = "smooth-random-walk"
    noise_scale: float = 1e-4
    momentum: float = 0.9
    box_deg: float = 0.1
    loop_period: int = 24
    origin: tuple[float, float] = (39.9, 116.3)

    def __post_init__(self):
        if self.motion not in ("smooth-random-walk", "periodic-loop"):
            raise ValueError(f"unknown motion {self.motion!r}")


def synthesize(profile: SynthProfile, seed: int) -> list[RawRecord]:
    """Walkers sampled at a fixed 60 s interval inside a ``box_deg`` square.

    smooth-random-walk: velocity follows ``v <- momentum * v + N(0, noise_scale^2)``
    from a draw of its stationary distribution, and positions integrate it; a path wider than the box is shrunk (never
    stretched) to fit, then placed at a uniform offset inside it.
    periodic-loop: a noisy circle of random radius traversed once per ``loop_period``.
    """
    rng = np.random.default_rng(seed)
    records = []
    n = profile.points_per_walker
    for k in range(profile.walker_count):
        if profile.motion == "smooth-random-walk":
            noise = rng.normal(0.0, profile.noise_scale, size=(n, 2))
            vel = rng.normal(0.0, profile.noise_scale / np.sqrt(1.0 - profile.momentum**2), size=2)
            pos = np.empty((n, 2))
            p = np.zeros(2)
            for t in range(n):
                pos[t] = p
                vel = profile.momentum * vel + noise[t]
                p = p + vel
            pos -= pos.min(axis=0)
            extent = float(pos.max()) if n else 0.0
            if extent > profile.box_deg:
                pos *= profile.box_deg / extent
            pos += rng.uniform(0.0, 1.0, size=2) * (profile.box_deg - pos.max(axis=0))
        else:
            radius = rng.uniform(0.1, 0.4) * profile.box_deg
            phase = rng.uniform(0.0, 2 * np.pi)
            ang = phase + 2 * np.pi * np.arange(n) / profile.loop_period
            centre = np.full(2, profile.box_deg / 2)
            pos = centre + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            pos = pos + rng.normal(0.0, profile.noise_scale, size=(n, 2))
        lat = np.clip(profile.origin[0] + pos[:, 0], -90.0, 90.0)
        lon = np.clip(profile.origin[1] + pos[:, 1], -180.0, 180.0)
        uid = f"walker_{k:04d}"
        t0 = SYNTH_EPOCH + k * n * SAMPLE_INTERVAL_S
        for t in range(n):
            records.append(RawRecord(uid, t0 + t * SAMPLE_INTERVAL_S, float(lat[t]), float(lon[t])))
    return records


def group_by_user(records: Sequence[RawRecord]) -> dict[str, list[RawRecord]]:
    users: dict[str, list[RawRecord]] = {}
    for r in records:
        users.setdefault(r.user_id, []).append(r)
    return {u: sorted(rs, key=lambda r: r.timestamp) for u, rs in users.items()}


# ---------------------------------------------------------------------------
# Coordinate scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaler:
    mode: str = "none"
    lo: tuple[float, float] = (0.0, 0.0)
    hi: tuple[float, float] = (1.0, 1.0)

    def transform(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        if self.mode == "none":
            return xy.copy()
        lo, hi = np.array(self.lo), np.array(self.hi)
        span = hi - lo
        out = np.where(span > 0, (xy - lo) / np.where(span > 0, span, 1.0), 0.5)
        return out

    def inverse(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        if self.mode == "none":
            return xy.copy()
        lo, hi = np.array(self.lo), np.array(self.hi)
        span = hi - lo
        return np.where(span > 0, xy * span + lo, lo)


def fit_scaler(dataset: Sequence[TrajectoryWindow], mode: str) -> Scaler:
    if mode == "none":
        return Scaler("none")
    if mode != "minmax":
        raise ValueError(f"unknown normalization mode {mode!r}")
    if not dataset:
        raise ValueError("minmax normalization needs a nonempty dataset")
    allxy = np.concatenate([np.vstack([w.points, w.target[None]]) for w in dataset])
    lo = allxy.min(axis=0)
    hi = allxy.max(axis=0)
    return Scaler("minmax", (float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])))


def apply_scaler(dataset: Sequence[TrajectoryWindow], scaler: Scaler) -> list[TrajectoryWindow]:
    return [
        replace(w, points=scaler.transform(w.points), target=scaler.transform(w.target[None])[0])
        for w in dataset
    ]


def normalize_coords(dataset: Sequence[TrajectoryWindow], mode: str) -> tuple[list[TrajectoryWindow], Scaler]:
    scaler = fit_scaler(dataset, mode)
    return apply_scaler(dataset, scaler), scaler


def denormalize_coords(dataset: Sequence[TrajectoryWindow], scaler: Scaler) -> list[TrajectoryWindow]:
    return [
        replace(w, points=scaler.inverse(w.points), target=scaler.inverse(w.target[None])[0])
        for w in dataset
    ]
