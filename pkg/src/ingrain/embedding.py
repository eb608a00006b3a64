"""Linear point embeddings and sinusoidal time-frame encodings."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .data import TrajectoryWindow


def frame_encoding(t: int, D: int) -> np.ndarray:
    """1 x D encoding: sin(t / 10000^(d/D)) on even d, cos on odd d."""
    return frame_encodings(np.array([t]), D)


def frame_encodings(frames, D: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    if D < 2:
        raise ValueError(f"encoding dimension must be >= 2, got {D}")
    if frames.size and frames.min() < 0:
        raise ValueError("time frames must be non-negative")
    return _encoding_table(int(frames.max(initial=0)) + 1, D)[frames]


@lru_cache(maxsize=32)
def _encoding_table(n: int, D: int) -> np.ndarray:
    d = np.arange(D)
    angle = np.arange(n)[:, None] / np.power(10000.0, d / D)[None, :]
    table = np.where(d % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


@dataclass
class PointQueues:
    E_obs: ad.DiffArray
    E_mis: ad.DiffArray
    missing_positions: np.ndarray


def embed(points: ad.DiffArray, W: ad.DiffArray, frames, D: int | None = None) -> ad.DiffArray:
    """``points @ W`` plus the frame encoding of each row."""
    D = W.cols if D is None else D
    return ad.add(ad.matmul(points, W), ad.const(frame_encodings(frames, D)))


def build_queues(window: TrajectoryWindow, W_obs: ad.DiffArray, W_mis: ad.DiffArray) -> PointQueues:
    """Observed queue over all L positions (missing rows zeroed) and the missing queue.

    Both queues carry the frame encoding of every row, so a missing point has
    the same temporal signature on both sides.
    """
    mis = window.missing_positions
    pts = np.where(window.mask[:, None], window.points, 0.0)
    E_obs = embed(ad.const(pts), W_obs, window.frames)
    E_mis = embed(ad.const(np.zeros((len(mis), 2))), W_mis, window.frames[mis])
    return PointQueues(E_obs, E_mis, mis)
