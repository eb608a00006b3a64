"""Supplement layer, GRU and next-location head."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .params import ModelConfig

Params = dict[str, ad.DiffArray]


def supplement_rows(Y_obs, Y_mis, positions, mode: str) -> ad.DiffArray:
    """Place the rows of ``Y_mis`` at row ``positions`` of ``Y_obs``.

    ``replace`` substitutes them, ``add`` adds them, ``none`` returns Y_obs.
    """
    Y_obs = ad.const(Y_obs)
    positions = np.asarray(positions, dtype=np.intp)
    if mode == "none" or len(positions) == 0:
        return Y_obs
    Y_mis = ad.const(Y_mis)
    if Y_mis.rows != len(positions):
        raise ad.DimensionError(f"{Y_mis.rows} supplement rows for {len(positions)} positions")
    R = Y_obs.rows
    if mode == "replace":
        index = np.arange(R)
        index[positions] = R + np.arange(len(positions))
        return ad.gather_rows(ad.concat_rows([Y_obs, Y_mis]), index)
    if mode == "add":
        index = np.zeros(R, dtype=np.intp)
        index[positions] = 1 + np.arange(len(positions))
        zero = ad.const(np.zeros((1, Y_obs.cols)))
        return ad.add(Y_obs, ad.gather_rows(ad.concat_rows([zero, Y_mis]), index))
    raise ValueError(f"unknown supplement mode {mode!r}")


def supplement(Y_obs, y_mis: dict[int, ad.DiffArray], mask, mode: str) -> ad.DiffArray:
    """Full-trajectory embedding of one window; every masked index needs a Y_mis row."""
    missing = np.flatnonzero(~np.asarray(mask, dtype=bool))
    absent = [int(i) for i in missing if int(i) not in y_mis]
    if absent:
        raise ad.ContractError(f"no Y_mis row for missing positions {absent}")
    if len(missing) == 0 or mode == "none":
        return ad.const(Y_obs)
    rows = ad.concat_rows([y_mis[int(i)] for i in missing])
    return supplement_rows(Y_obs, rows, missing, mode)


def _gru_weights(P: Params):
    W_x = ad.concat_cols([P["gru.W_fx"], P["gru.W_rx"], P["gru.W_cx"]])
    W_h = ad.concat_cols([P["gru.W_fh"], P["gru.W_rh"], P["gru.W_ch"]])
    b = ad.concat_cols([P["gru.b_f"], P["gru.b_r"], P["gru.b_c"]])
    return W_x, W_h, b


def _time_major(X: ad.DiffArray, batch: int) -> ad.DiffArray:
    if X.rows % batch:
        raise ad.DimensionError(f"{X.rows} rows cannot hold {batch} equal sequences")
    if batch == 1:
        return X
    L = X.rows // batch
    return ad.gather_rows(X, np.arange(X.rows).reshape(batch, L).T.ravel())


def gru_forward(X, P: Params, batch: int = 1) -> list[ad.DiffArray]:
    """Hidden states h_1..h_L (each ``batch`` x H) of ``batch`` stacked sequences.

    Rows of ``X`` are window-major (row ``b * L + t``) and h_0 = 0. Gates:
        f = sigma(x W_fx + h W_fh + b_f)       update gate
        r = sigma(x W_rx + h W_rh + b_r)       reset gate
        c = tanh(x W_cx + r * (h W_ch) + b_c)
        h = (1 - f) * c + f * h_prev
    """
    X = _time_major(ad.const(X), batch)
    W_x, W_h, b = _gru_weights(P)
    stacked = gru_sequence(X, W_x, W_h, b, batch)
    L = X.rows // batch
    return [ad.slice_rows(stacked, t * batch, (t + 1) * batch) for t in range(L)] if L > 1 else [stacked]


def gru_last(X, P: Params, batch: int = 1) -> ad.DiffArray:
    """Final hidden state h_L only."""
    X = _time_major(ad.const(X), batch)
    W_x, W_h, b = _gru_weights(P)
    stacked = gru_sequence(X, W_x, W_h, b, batch)
    return ad.slice_rows(stacked, X.rows - batch, X.rows)


def gru_sequence(X, W_x, W_h, b, batch: int) -> ad.DiffArray:
    """All hidden states of a GRU as one time-major (L * batch) x H array.

    A single tape operation with hand-written backpropagation through time;
    ``W_x``, ``W_h`` and ``b`` hold the update, reset and candidate blocks
    side by side.
    """
    X, W_x, W_h, b = ad.const(X), ad.const(W_x), ad.const(W_h), ad.const(b)
    H = W_h.rows
    if W_x.shape != (X.cols, 3 * H) or W_h.shape != (H, 3 * H) or b.shape != (1, 3 * H):
        raise ad.DimensionError(
            f"gru_sequence: X {X.shape}, W_x {W_x.shape}, W_h {W_h.shape}, b {b.shape}"
        )
    L = X.rows // batch
    xv, wxv, whv = X.value, W_x.value, W_h.value
    XW = xv @ wxv + b.value
    h = np.zeros((batch, H))
    hs = np.empty((L * batch, H))
    saved = []
    for t in range(L):
        xw = XW[t * batch : (t + 1) * batch]
        hw = h @ whv
        fr = xw[:, : 2 * H] + hw[:, : 2 * H]
        fr = 1.0 / (1.0 + np.exp(-fr))
        f, r = fr[:, :H], fr[:, H:]
        hc = hw[:, 2 * H :]
        c = np.tanh(xw[:, 2 * H :] + r * hc)
        h_new = (1.0 - f) * c + f * h
        saved.append((h, f, r, c, hc))
        hs[t * batch : (t + 1) * batch] = h_new
        h = h_new

    def backward(G):
        dXW = np.empty((L * batch, 3 * H))
        dWh = np.zeros_like(whv)
        dh = np.zeros((batch, H))
        for t in range(L - 1, -1, -1):
            h_prev, f, r, c, hc = saved[t]
            dh = dh + G[t * batch : (t + 1) * batch]
            dc_pre = dh * (1.0 - f) * (1.0 - c * c)
            df_pre = dh * (h_prev - c) * f * (1.0 - f)
            dr_pre = dc_pre * hc * r * (1.0 - r)
            dhw = np.concatenate([df_pre, dr_pre, dc_pre * r], axis=1)
            dXW[t * batch : (t + 1) * batch] = np.concatenate([df_pre, dr_pre, dc_pre], axis=1)
            dWh += h_prev.T @ dhw
            dh = dh * f + dhw @ whv.T
        return dXW @ wxv.T, xv.T @ dXW, dWh, dXW.sum(axis=0, keepdims=True)

    return ad._record(hs, (X, W_x, W_h, b), backward)


def gru_forward_reference(X, P: Params, batch: int = 1) -> list[ad.DiffArray]:
    """The same recurrence composed from elementwise tape operations."""
    X = _time_major(ad.const(X), batch)
    L = X.rows // batch
    H = P["gru.W_fh"].rows
    W_x, W_h, b = _gru_weights(P)
    XW = ad.add(ad.matmul(X, W_x), b)
    h = ad.const(np.zeros((batch, H)))
    states = []
    for t in range(L):
        xw = ad.slice_rows(XW, t * batch, (t + 1) * batch)
        hw = ad.matmul(h, W_h)
        f = ad.sigmoid(ad.add(ad.slice_cols(xw, 0, H), ad.slice_cols(hw, 0, H)))
        r = ad.sigmoid(ad.add(ad.slice_cols(xw, H, 2 * H), ad.slice_cols(hw, H, 2 * H)))
        c = ad.tanh(ad.add(ad.slice_cols(xw, 2 * H, 3 * H), ad.mul(r, ad.slice_cols(hw, 2 * H, 3 * H))))
        h = ad.add(ad.mul(one_minus(f), c), ad.mul(f, h))
        states.append(h)
    return states


def one_minus(a: ad.DiffArray) -> ad.DiffArray:
    return ad.sub(ad.const(np.ones(a.shape)), a)


def predict_next(h_last, P: Params) -> ad.DiffArray:
    return ad.add(ad.matmul(h_last, P["predict.W"]), P["predict.b"])


def predict_from_sequence(Y_seq, P: Params, cfg: ModelConfig, batch: int = 1) -> ad.DiffArray:
    """``batch`` x 2 next-location predictions from stacked full-trajectory embeddings."""
    Y_seq = ad.const(Y_seq)
    if cfg.use_rnn:
        return predict_next(gru_last(Y_seq, P, batch), P)
    L = Y_seq.rows // batch
    avg = np.kron(np.eye(batch), np.full((1, L), 1.0 / L))
    return predict_next(ad.matmul(ad.const(avg), Y_seq), P)
