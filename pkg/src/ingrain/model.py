"""The joint imputation + prediction model: one training cycle and test-time inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import TrajectoryWindow
from .imputer import CycleOutput, CycleState, commit_cycle, cycle_forward
from .losses import LossWeights, distances_node, fuse, reference_speeds, weighted_sum
from .params import ModelConfig, ModelParams
from .predictor import predict_from_sequence, supplement_rows

Params = dict[str, ad.DiffArray]


@dataclass(frozen=True)
class LossOptions:
    weights: LossWeights = LossWeights()
    squared_loss: bool = False
    vel_literal: bool = False


@dataclass
class CycleLosses:
    """Tape nodes for one cycle plus how many windows fed each term."""

    fused: ad.DiffArray
    l_imp: ad.DiffArray | None
    l_pre: ad.DiffArray | None
    l_vel: ad.DiffArray | None
    n_imp: int
    n_pre: int
    n_vel: int

    def values(self) -> tuple[float, float, float]:
        v = lambda x: 0.0 if x is None else float(x.value[0, 0])  # noqa: E731
        return v(self.l_imp), v(self.l_pre), v(self.l_vel)


def current_points(states: Sequence[CycleState], tape: ad.Tape | None) -> ad.DiffArray:
    """Stacked L x 2 coordinates of each window with imputations so far."""
    L = states[0].window.length
    base = np.concatenate([s.points for s in states])
    nodes, rows = [], []
    if tape is not None:
        for b, s in enumerate(states):
            for idx, node in s.point_nodes.items():
                if node.tape is tape:
                    nodes.append(node)
                    rows.append(b * L + idx)
    if not nodes:
        return ad.const(base)
    base = base.copy()
    base[rows] = 0.0
    index = np.arange(len(base))
    index[rows] = len(base) + np.arange(len(rows))
    return ad.gather_rows(ad.concat_rows([ad.const(base)] + nodes), index)


def _lift(x: ad.DiffArray, tape: ad.Tape | None) -> ad.DiffArray:
    if tape is None or x.tape is not tape:
        return ad.DiffArray(x.value)
    return x


def cycle_sequence(states, out: CycleOutput, tape) -> tuple[ad.DiffArray, list[int]]:
    """Decoder rows of this cycle and of earlier cycles, with their stacked row positions."""
    L = states[out.active[0]].window.length
    chunks, positions = [], []
    if out.Y_mis is not None:
        chunks.append(out.Y_mis)
        for j, sel in enumerate(out.selected):
            positions += [j * L + idx for idx in sel]
    for j, i in enumerate(out.active):
        for idx, row in states[i].y_mis.items():
            chunks.append(_lift(row, tape))
            positions.append(j * L + idx)
    if not chunks:
        return None, []
    return (chunks[0] if len(chunks) == 1 else ad.concat_rows(chunks)), positions


def cycle_losses(states: list[CycleState], out: CycleOutput, P: Params, cfg: ModelConfig,
                 opts: LossOptions, tape: ad.Tape | None) -> CycleLosses:
    """The fused objective for one cycle in training mode.

    The imputation term covers the points imputed in this cycle; the
    prediction runs on the supplemented sequence as it stands after the
    cycle (not-yet-imputed positions keep their encoder rows); the velocity
    term covers segments touching a point imputed in this cycle whose other
    end is already known.
    """
    w = opts.weights
    act = [states[i] for i in out.active]
    B = len(act)

    l_imp = l_vel = None
    n_imp = n_vel = 0
    if out.imputed is not None:
        truth = np.concatenate([s.window.points[sel] for s, sel in zip(act, out.selected) if sel])
        sizes = [len(sel) for sel in out.selected if sel]
        n_imp = len(sizes)
        weights = np.concatenate([np.full(k, 1.0 / (k * n_imp)) for k in sizes])
        l_imp = weighted_sum(distances_node(out.imputed, ad.const(truth), opts.squared_loss), weights)

        l_vel, n_vel = _cycle_velocity(act, out, tape, opts)

    rows, positions = cycle_sequence(states, out, tape)
    Y_seq = out.Y_obs if rows is None else supplement_rows(out.Y_obs, rows, positions, cfg.supplement_mode)
    pred = predict_from_sequence(Y_seq, P, cfg, batch=B)
    targets = np.stack([s.window.target for s in act])
    l_pre = ad.mean_all(distances_node(pred, ad.const(targets), opts.squared_loss))
    n_pre = B

    fused = fuse(l_imp, l_pre, l_vel, w)
    return CycleLosses(fused, l_imp, l_pre, l_vel, n_imp, n_pre, n_vel)


def _cycle_velocity(act: list[CycleState], out: CycleOutput, tape, opts: LossOptions):
    L = act[0].window.length
    X = current_points(act, tape)
    index = np.arange(X.rows)
    o = 0
    for j, sel in enumerate(out.selected):
        for k, idx in enumerate(sel):
            index[j * L + idx] = X.rows + o + k
        o += len(sel)
    X = ad.gather_rows(ad.concat_rows([X, out.imputed]), index)

    starts, ends, ref, inv_dt, wts = [], [], [], [], []
    n_windows = 0
    for j, (s, sel) in enumerate(zip(act, out.selected)):
        if not sel:
            continue
        n_windows += 1
        win = s.window
        known = win.mask.copy()
        known[list(s.imputed)] = True
        known[sel] = True
        new = np.zeros(L, dtype=bool)
        new[sel] = True
        segs = [l for l in range(L - 1) if known[l] and known[l + 1] and (new[l] or new[l + 1])]
        v = None
        if not opts.vel_literal:
            v = reference_speeds(win.points, win.frames, win.mask)
            if v is None:
                continue
        dt = np.diff(win.frames).astype(np.float64)
        for l in segs:
            starts.append(j * L + l)
            ends.append(j * L + l + 1)
            ref.append(0.0 if v is None else v[l])
            inv_dt.append(1.0 / dt[l])
            wts.append(1.0 / len(segs))
    if n_windows == 0:
        return None, 0
    if not starts:
        return ad.const(np.zeros((1, 1))), n_windows
    inv_dt = ad.const(np.asarray(inv_dt)[:, None])
    step = ad.sub(ad.gather_rows(X, ends), ad.gather_rows(X, starts))
    speed = ad.mul(ad.row_norms(step), inv_dt)
    if opts.vel_literal:
        truth = np.concatenate([s.window.points for s in act])
        true_step = ad.const(truth[ends] - truth[starts])
        reference = ad.mul(ad.row_norms(ad.sub(true_step, step)), inv_dt)
    else:
        reference = ad.const(np.asarray(ref)[:, None])
    gap = ad.sub(speed, reference)
    gap = ad.mul(gap, gap) if opts.squared_loss else ad.absolute(gap)
    return weighted_sum(gap, np.asarray(wts) / n_windows), n_windows


class Ingrain:
    """Trained weights plus the configuration needed to run them."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, points_per_cycle: int = 1):
        self.cfg = cfg
        self.params = params
        self.n = points_per_cycle

    def infer(self, windows: Sequence[TrajectoryWindow], batch_size: int = 32,
              probe: list | None = None, counters: dict | None = None):
        """Test-mode imputation followed by a single prediction per window.

        Returns a list of (imputed dict, predicted 2-vector, cycle history).
        """
        P = self.params.constants()
        results = []
        for start in range(0, len(windows), batch_size):
            chunk = list(windows[start : start + batch_size])
            states = [CycleState.start(w) for w in chunk]
            out = cycle_forward(states, P, self.cfg, self.n, None, probe, include_finished=True)
            commit_cycle(states, out)
            while not all(s.done for s in states):
                out = cycle_forward(states, P, self.cfg, self.n, None, probe)
                commit_cycle(states, out)
            preds = predict_states(states, P, self.cfg)
            if counters is not None:
                counters["predict_calls"] = counters.get("predict_calls", 0) + 1
            for s, p in zip(states, preds):
                results.append((dict(s.imputed), p, s.history))
        return results

    def impute_and_predict(self, window: TrajectoryWindow):
        imputed, pred, _ = self.infer([window])[0]
        return imputed, pred


def predict_states(states: Sequence[CycleState], P: Params, cfg: ModelConfig, tape=None) -> np.ndarray:
    """Predictions from each window's final Y_obs and all of its decoder rows."""
    L = states[0].window.length
    Y_obs = ad.concat_rows([_lift(s.y_obs, tape) for s in states])
    chunks, positions = [], []
    for j, s in enumerate(states):
        for idx in sorted(s.y_mis):
            chunks.append(_lift(s.y_mis[idx], tape))
            positions.append(j * L + idx)
    Y_seq = Y_obs if not chunks else supplement_rows(Y_obs, ad.concat_rows(chunks), positions, cfg.supplement_mode)
    return predict_from_sequence(Y_seq, P, cfg, batch=len(states)).value
