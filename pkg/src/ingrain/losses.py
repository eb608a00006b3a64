"""Imputation, prediction and velocity losses.

The plain functions score a single window from numpy values and double as
evaluation metrics; the ``*_node`` variants build the same quantities on a
tape for a batch of windows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    imp: float = 1.0
    pre: float = 1.0
    vel: float = 0.0

    def __post_init__(self):
        if min(self.imp, self.pre, self.vel) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.imp == self.pre == self.vel == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    l_imp: float
    l_pre: float
    l_vel: float
    l_learn: float

    @classmethod
    def fused(cls, l_imp: float, l_pre: float, l_vel: float, w: LossWeights) -> "LossReport":
        return cls(l_imp, l_pre, l_vel, w.imp * l_imp + w.pre * l_pre + w.vel * l_vel)


def _dist(a, b, squared: bool = False) -> np.ndarray:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    sq = np.sum(np.atleast_2d(d) ** 2, axis=1)
    return sq if squared else np.sqrt(sq)


def loss_imp(imputed: dict, truth: dict, squared: bool = False) -> float:
    """Mean Euclidean distance between imputed and true points (0 when nothing is missing)."""
    if set(imputed) != set(truth):
        raise ad.ContractError("imputed and truth cover different indices")
    if not imputed:
        return 0.0
    keys = sorted(imputed)
    return float(np.mean(_dist([imputed[k] for k in keys], [truth[k] for k in keys], squared)))


def loss_pre(predicted, target, squared: bool = False) -> float:
    return float(_dist(predicted, target, squared)[0])


def segment_speeds(points: np.ndarray, frames: np.ndarray) -> np.ndarray:
    return _dist(points[1:], points[:-1]) / np.diff(frames).astype(np.float64)


def reference_speeds(points: np.ndarray, frames: np.ndarray, mask: np.ndarray) -> np.ndarray | None:
    """Speeds between consecutive observed points, interpolated onto every segment.

    Each observed pair's speed sits at the midpoint of its two frames; segment
    midpoints outside the observed range take the nearest value. None when
    fewer than two points are observed.
    """
    obs = np.flatnonzero(mask)
    if len(obs) < 2:
        return None
    f = frames.astype(np.float64)
    speeds = _dist(points[obs[1:]], points[obs[:-1]]) / np.diff(f[obs])
    anchors = (f[obs[1:]] + f[obs[:-1]]) / 2
    mids = (f[1:] + f[:-1]) / 2
    return np.interp(mids, anchors, speeds)


def loss_vel(points: np.ndarray, frames: np.ndarray, mask: np.ndarray,
             truth: np.ndarray | None = None, literal: bool = False,
             squared: bool = False) -> float:
    """Mean |speed of imputed sequence - observed reference speed| over segments touching an imputed point.

    ``points`` is the window with imputations filled in and ``mask`` marks the
    originally observed points. With ``literal`` the reference is the speed
    of the difference sequence ``truth - points`` instead.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.all() or len(points) < 2:
        return 0.0
    touched = ~(mask[1:] & mask[:-1])
    v_hat = segment_speeds(points, frames)
    if literal:
        v = segment_speeds(truth - points, frames)
    else:
        v = reference_speeds(points, frames, mask)
        if v is None:
            return 0.0
    gap = v_hat[touched] - v[touched]
    return float(np.mean(gap * gap if squared else np.abs(gap)))


# ---------------------------------------------------------------------------
# Tape versions
# ---------------------------------------------------------------------------


def distances_node(a, b, squared: bool = False) -> ad.DiffArray:
    diff = ad.sub(a, b)
    return ad.row_sq_norms(diff) if squared else ad.row_norms(diff)


def weighted_sum(col: ad.DiffArray, weights: np.ndarray) -> ad.DiffArray:
    """weights . col as a 1 x 1 node."""
    return ad.matmul(ad.const(np.asarray(weights, dtype=np.float64)[None, :]), col)


def fuse(l_imp, l_pre, l_vel, w: LossWeights) -> ad.DiffArray:
    """lambda1 * l_imp + lambda2 * l_pre + lambda3 * l_vel; terms that are None or weighted 0 are left out."""
    total = None
    for term, lam in ((l_imp, w.imp), (l_pre, w.pre), (l_vel, w.vel)):
        if term is None or lam == 0:
            continue
        t = ad.scale(term, lam)
        total = t if total is None else ad.add(total, t)
    return ad.const(np.zeros((1, 1))) if total is None else total
