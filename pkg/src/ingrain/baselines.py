"""Reference methods the model is compared against.

* ``knn_linear_impute``: per missing point, a least-squares line through the
  k temporally nearest observed points of the same window.
* ``linear_interp_impute``: piecewise-linear interpolation in time.
* ``persistence_predict``: the next location is the last observed one.
* ``sgru_predict_baseline``: a two-layer GRU trained for prediction only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import TrajectoryWindow
from .losses import distances_node, loss_pre
from .params import ModelParams
from .predictor import gru_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KnnLinearConfig:
    k: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def _line_fit(frames: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    """Evaluate the least-squares line values = a + b * frame at ``t`` (per column)."""
    f_bar = frames.mean()
    dev = frames - f_bar
    sxx = float(dev @ dev)
    y_bar = values.mean(axis=0)
    if sxx == 0.0:
        return y_bar
    slope = dev @ (values - y_bar) / sxx
    return y_bar + slope * (t - f_bar)


def knn_linear_impute(window: TrajectoryWindow, k: int) -> dict[int, np.ndarray]:
    """Impute each missing point from its ``k`` temporally nearest observed neighbours.

    Neighbours are ranked by ``|frame - t|`` with ties going to the smaller
    frame; one line per axis is fitted to them and evaluated at ``t``.
    """
    KnnLinearConfig(k)
    obs = window.observed_positions
    if len(obs) < 2:
        raise ad.ContractError(f"knn_linear_impute needs >= 2 observed points, window has {len(obs)}")
    if k > len(obs):
        raise ad.ContractError(f"k={k} exceeds the {len(obs)} observed points")
    obs_frames = window.frames[obs].astype(np.float64)
    out = {}
    for idx in window.missing_positions:
        t = float(window.frames[idx])
        order = np.lexsort((obs_frames, np.abs(obs_frames - t)))[:k]
        out[int(idx)] = _line_fit(obs_frames[order], window.points[obs[order]], t)
    return out


def linear_interp_impute(window: TrajectoryWindow) -> dict[int, np.ndarray]:
    """Per-axis linear interpolation between observed frames, constant beyond the ends."""
    obs = window.observed_positions
    mis = window.missing_positions
    if len(obs) < 1:
        raise ad.ContractError("linear_interp_impute needs an observed point")
    if len(mis) == 0:
        return {}
    est = np.stack(
        [np.interp(window.frames[mis], window.frames[obs], window.points[obs, a]) for a in range(2)],
        axis=1,
    )
    return {int(i): est[j] for j, i in enumerate(mis)}


def persistence_predict(window: TrajectoryWindow) -> np.ndarray:
    """The last observed point of the window."""
    obs = window.observed_positions
    if len(obs) == 0:
        raise ad.ContractError("persistence needs an observed point")
    return window.points[obs[-1]].copy()


class ImputerAdapter:
    """Pairs an imputation function with persistence so ``evaluate`` can score it."""

    def __init__(self, impute):
        self.impute = impute

    def impute_and_predict(self, window: TrajectoryWindow):
        return self.impute(window), persistence_predict(window)


# ---------------------------------------------------------------------------
# Stacked GRU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgruConfig:
    hidden_size: int = 32
    layers: int = 2
    epochs: int = 60
    lr: float = 0.001
    batch_size: int = 8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 1 or self.layers < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hidden_size, layers, batch_size >= 1 and epochs >= 0 required")


SGRU_INPUT = 3  # x, y and the mask bit


def sgru_init(cfg: SgruConfig) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) GRU weights, zero biases and a zero output head.

    With a zero head an untrained model predicts the head bias, so its loss
    is simply the mean distance of the targets from that bias.
    """
    rng = np.random.default_rng(cfg.seed)
    H = cfg.hidden_size
    arrays = {}
    d_in = SGRU_INPUT
    for l in range(cfg.layers):
        arrays[f"sgru{l}.W_x"] = rng.uniform(-1, 1, (d_in, 3 * H)) * np.sqrt(1.0 / d_in)
        arrays[f"sgru{l}.W_h"] = rng.uniform(-1, 1, (H, 3 * H)) * np.sqrt(1.0 / H)
        arrays[f"sgru{l}.b"] = np.zeros((1, 3 * H))
        d_in = H
    arrays["head.W"] = np.zeros((H, 2))
    arrays["head.b"] = np.zeros((1, 2))
    return ModelParams(arrays)


def sgru_inputs(windows: Sequence[TrajectoryWindow]) -> np.ndarray:
    """Time-major (L * B) x 3 rows [x, y, observed]; missing points are zero vectors."""
    L = windows[0].length
    X = np.empty((L, len(windows), SGRU_INPUT))
    for b, w in enumerate(windows):
        X[:, b, :2] = np.where(w.mask[:, None], w.points, 0.0)
        X[:, b, 2] = w.mask
    return X.reshape(L * len(windows), SGRU_INPUT)


def sgru_forward(P: dict, windows: Sequence[TrajectoryWindow], layers: int) -> ad.DiffArray:
    B = len(windows)
    x = ad.const(sgru_inputs(windows))
    for l in range(layers):
        x = gru_sequence(x, P[f"sgru{l}.W_x"], P[f"sgru{l}.W_h"], P[f"sgru{l}.b"], B)
    last = ad.slice_rows(x, x.rows - B, x.rows)
    return ad.add(ad.matmul(last, P["head.W"]), P["head.b"])


class SgruModel:
    def __init__(self, cfg: SgruConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    def predict(self, windows: Sequence[TrajectoryWindow], batch_size: int = 64) -> np.ndarray:
        P = self.params.constants()
        out = [sgru_forward(P, windows[s : s + batch_size], self.cfg.layers).value
               for s in range(0, len(windows), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 2))

    def loss(self, windows: Sequence[TrajectoryWindow]) -> float:
        preds = self.predict(windows)
        return float(np.mean([loss_pre(p, w.target) for p, w in zip(preds, windows)]))


def sgru_predict_baseline(train_set: Sequence[TrajectoryWindow], test_set: Sequence[TrajectoryWindow],
                          cfg: SgruConfig) -> tuple[SgruModel, float]:
    """Train the stacked GRU on the prediction loss alone; return it with its test loss."""
    from .training import OptimState, adam_step, clip_global_norm

    if not train_set:
        raise ad.ContractError("S-GRU baseline needs a nonempty train set")
    params = sgru_init(cfg)
    opt = OptimState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[s : s + cfg.batch_size]]
            tape = ad.Tape()
            P = params.lift(tape)
            pred = sgru_forward(P, batch, cfg.layers)
            loss = ad.mean_all(distances_node(pred, ad.const(np.stack([w.target for w in batch]))))
            grads = params.flatten(tape.backward(loss).as_dict())
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, opt)
        log.debug("sgru epoch %d", epoch + 1)
    model = SgruModel(cfg, params)
    return model, (model.loss(test_set) if test_set else float("nan"))
