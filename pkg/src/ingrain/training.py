"""Adam, gradient clipping and the epoch / batch / cycle training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import MaskSpec, TrajectoryWindow, generate_mask
from .imputer import CycleState, commit_cycle, cycle_forward
from .losses import LossReport, LossWeights, loss_imp, loss_pre, loss_vel
from .model import CycleLosses, Ingrain, LossOptions, cycle_losses
from .params import ModelConfig, ModelParams, init_params

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(params: ModelParams, grads: dict[str, np.ndarray] | np.ndarray, state: OptimState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    g = grads if isinstance(grads, np.ndarray) else params.flatten(grads)
    if g.shape != params.flat.shape:
        raise ad.DimensionError(f"gradient of size {g.shape} for {params.flat.shape} parameters")
    if state.m is None:
        state.m = np.zeros_like(params.flat)
        state.v = np.zeros_like(params.flat)
    state.step += 1
    t = state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grad: np.ndarray, max_norm: float) -> float:
    """Scale ``grad`` in place to norm ``max_norm`` if it is longer; returns the original norm."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        grad *= max_norm / norm
    return norm


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    points_per_cycle: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    squared_loss: bool = False
    vel_literal: bool = False
    step_per_window: bool = False
    lr: float = 0.001
    batch_size: int = 70
    epochs: int = 60
    clip_norm: float = 5.0
    mask: MaskSpec = field(default_factory=lambda: MaskSpec(0.5))
    remask_each_epoch: bool = True
    eval_every: int = 1
    seed: int = 0

    @property
    def loss_options(self) -> LossOptions:
        return LossOptions(self.weights, self.squared_loss, self.vel_literal)


@dataclass
class EpochLog:
    epoch: int
    train: LossReport
    test_imp: float | None = None
    test_pre: float | None = None


@dataclass
class _Accumulator:
    s_imp: float = 0.0
    n_imp: int = 0
    s_pre: float = 0.0
    n_pre: int = 0
    s_vel: float = 0.0
    n_vel: int = 0

    def add(self, c: CycleLosses) -> None:
        imp, pre, vel = c.values()
        self.s_imp += imp * c.n_imp
        self.n_imp += c.n_imp
        self.s_pre += pre * c.n_pre
        self.n_pre += c.n_pre
        self.s_vel += vel * c.n_vel
        self.n_vel += c.n_vel

    def report(self, w: LossWeights) -> LossReport:
        mean = lambda s, n: s / n if n else 0.0  # noqa: E731
        return LossReport.fused(
            mean(self.s_imp, self.n_imp), mean(self.s_pre, self.n_pre), mean(self.s_vel, self.n_vel), w
        )


def window_masks(windows: Sequence[TrajectoryWindow], spec: MaskSpec, rng: np.random.Generator | None = None):
    """Masked copies of ``windows`` drawn from one stream (seeded by ``spec.seed`` unless ``rng`` is given)."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    return [w.with_mask(generate_mask(w.length, spec, rng)) for w in windows]


def train_batch(params: ModelParams, batch: Sequence[TrajectoryWindow], cfg: TrainConfig,
                opt: OptimState, acc: _Accumulator | None = None,
                on_step: Callable | None = None) -> None:
    """Run all imputation cycles of a batch, stepping the optimizer per cycle (or once per batch)."""
    states = [CycleState.start(w) for w in batch]
    opts = cfg.loss_options
    first = True
    tape = ad.Tape() if cfg.step_per_window else None
    P = params.lift(tape) if tape is not None else None
    total = None
    n_cycles = 0
    while first or not all(s.done for s in states):
        if not cfg.step_per_window:
            tape = ad.Tape()
            P = params.lift(tape)
        out = cycle_forward(states, P, cfg.model, cfg.points_per_cycle, tape, include_finished=first)
        losses = cycle_losses(states, out, P, cfg.model, opts, tape)
        if acc is not None:
            acc.add(losses)
        if on_step is not None:
            on_step(losses)
        commit_cycle(states, out, keep_graph=False)
        first = False
        if cfg.step_per_window:
            total = losses.fused if total is None else ad.add(total, losses.fused)
            n_cycles += 1
        else:
            _apply(params, tape, losses.fused, cfg, opt)
    if cfg.step_per_window:
        _apply(params, tape, ad.scale(total, 1.0 / n_cycles), cfg, opt)


def _apply(params: ModelParams, tape: ad.Tape, loss: ad.DiffArray, cfg: TrainConfig, opt: OptimState) -> None:
    grads = params.flatten(tape.backward(loss).as_dict())
    clip_global_norm(grads, cfg.clip_norm)
    adam_step(params, grads, opt)


def train(train_set: Sequence[TrajectoryWindow], cfg: TrainConfig,
          test_set: Sequence[TrajectoryWindow] | None = None,
          params: ModelParams | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[ModelParams, list[EpochLog]]:
    """Train on windows whose masks are already applied (or re-drawn each epoch).

    Batches are reshuffled every epoch from a generator seeded by ``cfg.seed``;
    test windows (masked) are scored in testing mode every ``eval_every``
    epochs and always after the last one.
    """
    if not train_set:
        raise ad.ContractError("training needs a nonempty train set")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.model, cfg.seed) if params is None else params
    opt = OptimState(lr=cfg.lr)
    mask_rng = np.random.default_rng([cfg.mask.seed, cfg.seed])
    logs = []
    for epoch in range(1, cfg.epochs + 1):
        data = list(train_set)
        if cfg.remask_each_epoch:
            data = window_masks(data, cfg.mask, mask_rng)
        order = rng.permutation(len(data))
        acc = _Accumulator()
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            train_batch(params, batch, cfg, opt, acc)
        entry = EpochLog(epoch, acc.report(cfg.weights))
        if test_set and (epoch == cfg.epochs or (cfg.eval_every > 0 and epoch % cfg.eval_every == 0)):
            ev = evaluate(Ingrain(cfg.model, params, cfg.points_per_cycle), test_set, batch_size=cfg.batch_size)
            entry.test_imp, entry.test_pre = ev.l_imp, ev.l_pre
        log.info("epoch %d imp %.6f pre %.6f vel %.6f", epoch, entry.train.l_imp, entry.train.l_pre, entry.train.l_vel)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return params, logs


@dataclass
class EvalResult:
    l_imp: float
    l_pre: float
    l_vel: float
    per_window: list = field(default_factory=list)


def score(windows: Sequence[TrajectoryWindow], imputations: Sequence[dict], predictions: Sequence | None,
          literal_vel: bool = False) -> EvalResult:
    """Average L2 imputation loss over windows with missing points, and average prediction loss."""
    imps, vels, pres = [], [], []
    for k, (w, imp) in enumerate(zip(windows, imputations)):
        mis = [int(i) for i in w.missing_positions]
        if mis:
            imps.append(loss_imp({i: imp[i] for i in mis}, {i: w.points[i] for i in mis}))
            filled = w.points.copy()
            for i in mis:
                filled[i] = imp[i]
            vels.append(loss_vel(filled, w.frames, w.mask, truth=w.points, literal=literal_vel))
        if predictions is not None:
            pres.append(loss_pre(predictions[k], w.target))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return EvalResult(mean(imps), mean(pres) if predictions is not None else float("nan"), mean(vels))


def evaluate(model, windows: Sequence[TrajectoryWindow], batch_size: int = 32) -> EvalResult:
    """Testing-mode scores: imputation first, prediction once per window afterwards."""
    if isinstance(model, Ingrain):
        res = model.infer(windows, batch_size=batch_size)
        imputations = [r[0] for r in res]
        preds = [r[1] for r in res]
    else:
        pairs = [model.impute_and_predict(w) for w in windows]
        imputations = [p[0] for p in pairs]
        preds = [p[1] for p in pairs]
    return score(windows, imputations, preds)
