"""Attention encoder/decoder stacks and the progressive imputation cycle.

Several windows can be processed at once by stacking their rows; a
block layout then confines every query to the keys of its own window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import TrajectoryWindow
from .embedding import embed
from .params import ModelConfig

Params = dict[str, ad.DiffArray]


@dataclass(frozen=True)
class BlockLayout:
    """Contiguous per-window row blocks for queries and keys.

    Query block j may only attend to key block j. Equal-sized blocks are
    computed as a batch of small attention problems instead of one masked
    dense one.
    """

    q_sizes: tuple[int, ...]
    k_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.q_sizes) != len(self.k_sizes):
            raise ad.DimensionError(f"{len(self.q_sizes)} query blocks vs {len(self.k_sizes)} key blocks")

    @property
    def uniform(self) -> bool:
        return len(set(self.q_sizes)) == 1 and len(set(self.k_sizes)) == 1

    def dense(self) -> np.ndarray:
        q = np.repeat(np.arange(len(self.q_sizes)), self.q_sizes)
        k = np.repeat(np.arange(len(self.k_sizes)), self.k_sizes)
        return q[:, None] == k[None, :]


def attention(Q, K, V, allowed=None, probe: list | None = None) -> ad.DiffArray:
    """softmax(Q K^T / sqrt(d_k)) V, with no causal masking.

    ``allowed`` is None (every query sees every key), a boolean matrix, or a
    :class:`BlockLayout`. The whole computation is one tape operation; its
    weights are appended to ``probe`` as a dense matrix.
    """
    Q, K, V = ad.const(Q), ad.const(K), ad.const(V)
    if Q.cols != K.cols or K.rows != V.rows:
        raise ad.DimensionError(
            f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} do not conform"
        )
    s = 1.0 / math.sqrt(Q.cols)
    if isinstance(allowed, BlockLayout):
        if sum(allowed.q_sizes) != Q.rows or sum(allowed.k_sizes) != K.rows:
            raise ad.DimensionError(f"block layout does not cover Q {Q.shape} / K {K.shape}")
        if len(allowed.q_sizes) == 1:
            allowed = None
        elif allowed.uniform:
            return _batched_attention(Q, K, V, allowed, s, probe)
        else:
            allowed = allowed.dense()
    q, k, v = Q.value, K.value, V.value
    scores = (q @ k.T) * s
    if allowed is not None:
        if allowed.shape != scores.shape:
            raise ad.DimensionError(f"attention mask {allowed.shape} vs scores {scores.shape}")
        scores = np.where(allowed, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    A = e / e.sum(axis=1, keepdims=True)
    if probe is not None:
        probe.append(A)

    def backward(g):
        dA = g @ v.T
        dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True)) * s
        return dS @ k, dS.T @ q, A.T @ g

    return ad._record(A @ v, (Q, K, V), backward)


def _batched_attention(Q, K, V, layout: BlockLayout, s: float, probe) -> ad.DiffArray:
    B = len(layout.q_sizes)
    m, n = layout.q_sizes[0], layout.k_sizes[0]
    q = Q.value.reshape(B, m, -1)
    k = K.value.reshape(B, n, -1)
    v = V.value.reshape(B, n, -1)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * s
    e = np.exp(scores - scores.max(axis=2, keepdims=True))
    A = e / e.sum(axis=2, keepdims=True)
    if probe is not None:
        full = np.zeros((Q.rows, K.rows))
        full[layout.dense()] = A.ravel()
        probe.append(full)

    def backward(g):
        g = g.reshape(B, m, -1)
        dA = np.matmul(g, v.transpose(0, 2, 1))
        dS = A * (dA - np.sum(dA * A, axis=2, keepdims=True)) * s
        dq = np.matmul(dS, k).reshape(Q.shape)
        dk = np.matmul(dS.transpose(0, 2, 1), q).reshape(K.shape)
        dv = np.matmul(A.transpose(0, 2, 1), g).reshape(V.shape)
        return dq, dk, dv

    return ad._record(np.matmul(A, v).reshape(Q.rows, V.cols), (Q, K, V), backward)


def attention_reference(Q, K, V, allowed: np.ndarray | None = None) -> ad.DiffArray:
    """The same attention composed from primitive tape operations."""
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.cols))
    return ad.matmul(ad.softmax_rows(scores, allowed), V)


def multi_head(Z_q, Z_kv, P: Params, prefix: str, heads: int,
               allowed=None, probe: list | None = None) -> ad.DiffArray:
    """Concat(head_1..head_h) W_O with head_i = Attention(Z_q W_Q^i, Z_kv W_K^i, Z_kv W_V^i)."""
    outs = []
    for i in range(heads):
        q = ad.matmul(Z_q, P[f"{prefix}.WQ{i}"])
        k = ad.matmul(Z_kv, P[f"{prefix}.WK{i}"])
        v = ad.matmul(Z_kv, P[f"{prefix}.WV{i}"])
        outs.append(attention(q, k, v, allowed, probe))
    cat = outs[0] if heads == 1 else ad.concat_cols(outs)
    return ad.matmul(cat, P[f"{prefix}.WO"])


def feed_forward(x, P: Params, prefix: str) -> ad.DiffArray:
    hidden = ad.relu(ad.add(ad.matmul(x, P[f"{prefix}.W1"]), P[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, P[f"{prefix}.W2"]), P[f"{prefix}.b2"])


def _add_norm(x, y, P: Params, prefix: str) -> ad.DiffArray:
    return ad.layer_norm(ad.add(x, y), P[f"{prefix}.gain"], P[f"{prefix}.bias"])


def encoder_forward(E_obs, P: Params, cfg: ModelConfig,
                    allowed=None, probe: list | None = None) -> ad.DiffArray:
    x = ad.const(E_obs)
    for l in range(cfg.layers):
        x = _add_norm(x, multi_head(x, x, P, f"enc{l}.self", cfg.heads, allowed, probe), P, f"enc{l}.ln1")
        x = _add_norm(x, feed_forward(x, P, f"enc{l}.ff"), P, f"enc{l}.ln2")
    return x


def decoder_forward(E_mis, Y_obs, P: Params, cfg: ModelConfig,
                    self_allowed=None,
                    cross_allowed=None,
                    probe: list | None = None) -> ad.DiffArray:
    x = ad.const(E_mis)
    for l in range(cfg.layers):
        x = _add_norm(x, multi_head(x, x, P, f"dec{l}.self", cfg.heads, self_allowed, probe), P, f"dec{l}.ln1")
        x = _add_norm(x, multi_head(x, Y_obs, P, f"dec{l}.cross", cfg.heads, cross_allowed, probe), P, f"dec{l}.ln2")
        x = _add_norm(x, feed_forward(x, P, f"dec{l}.ff"), P, f"dec{l}.ln3")
    return x


def impute_head(Y_mis, P: Params) -> ad.DiffArray:
    return ad.add(ad.matmul(Y_mis, P["impute.W"]), P["impute.b"])


def block_allowed(q_sizes, k_sizes) -> BlockLayout:
    """Layout in which the j-th block of ``q_sizes[j]`` queries sees only the j-th key block."""
    return BlockLayout(tuple(int(x) for x in q_sizes), tuple(int(x) for x in k_sizes))


# ---------------------------------------------------------------------------
# Imputation cycles
# ---------------------------------------------------------------------------


@dataclass
class CycleState:
    """Progress of one window through its imputation cycles."""

    window: TrajectoryWindow
    remaining: list[int]
    imputed: dict[int, np.ndarray] = field(default_factory=dict)
    points: np.ndarray = None
    point_nodes: dict[int, ad.DiffArray] = field(default_factory=dict)
    y_mis: dict[int, ad.DiffArray] = field(default_factory=dict)
    y_obs: ad.DiffArray | None = None
    cycles: int = 0
    history: list[list[int]] = field(default_factory=list)

    @classmethod
    def start(cls, window: TrajectoryWindow) -> "CycleState":
        pts = np.where(window.mask[:, None], window.points, 0.0)
        return cls(window=window, remaining=[int(i) for i in window.missing_positions], points=pts)

    @property
    def done(self) -> bool:
        return not self.remaining

    def check(self) -> None:
        missing = set(int(i) for i in self.window.missing_positions)
        rem, imp = set(self.remaining), set(self.imputed)
        if rem & imp or rem | imp != missing or len(rem) != len(self.remaining):
            raise AssertionError(f"cycle state broken: remaining={sorted(rem)} imputed={sorted(imp)}")


@dataclass
class CycleOutput:
    """Tape-level results of one cycle over a batch of windows.

    ``active`` indexes the participating states; ``selected[j]`` lists the
    window positions imputed by active window j, whose rows start at
    ``offsets[j]`` in ``Y_mis`` / ``imputed``. ``Y_obs`` stacks L rows per
    active window.
    """

    active: list[int]
    selected: list[list[int]]
    offsets: list[int]
    Y_obs: ad.DiffArray
    Y_mis: ad.DiffArray | None
    imputed: ad.DiffArray | None


def _encoder_input(states: list[CycleState], tape: ad.Tape | None, cfg: ModelConfig, P: Params) -> ad.DiffArray:
    L = states[0].window.length
    frames = np.concatenate([s.window.frames for s in states])
    if not cfg.reencode_per_cycle:
        base = np.concatenate([np.where(s.window.mask[:, None], s.window.points, 0.0) for s in states])
        return embed(ad.const(base), P["embed.W_obs"], frames)
    base = np.concatenate([s.points for s in states])
    nodes, rows = [], []
    if tape is not None:
        for b, s in enumerate(states):
            for idx, node in s.point_nodes.items():
                if node.tape is tape:
                    nodes.append(node)
                    rows.append(b * L + idx)
    if not nodes:
        X = ad.const(base)
    else:
        base = base.copy()
        base[rows] = 0.0
        index = np.arange(len(base))
        index[rows] = len(base) + np.arange(len(rows))
        X = ad.gather_rows(ad.concat_rows([ad.const(base)] + nodes), index)
    return embed(X, P["embed.W_obs"], frames)


def cycle_forward(states: list[CycleState], P: Params, cfg: ModelConfig, n: int,
                  tape: ad.Tape | None = None, probe: list | None = None,
                  include_finished: bool = False) -> CycleOutput | None:
    """Run one imputation cycle over every state that still has missing points.

    With ``include_finished`` states without remaining points are also encoded
    (they get an empty selection), which is how a fully observed window gets
    its Y_obs. Returns None when nothing participates.
    """
    if n < 1:
        raise ValueError(f"points per cycle must be >= 1, got {n}")
    active = [i for i, s in enumerate(states) if include_finished or not s.done]
    if not active:
        return None
    act = [states[i] for i in active]
    L = act[0].window.length
    D = cfg.embed_dim

    E_obs = _encoder_input(act, tape, cfg, P)
    obs_sizes = [L] * len(act)
    Y_obs = encoder_forward(E_obs, P, cfg, block_allowed(obs_sizes, obs_sizes), probe)

    selected = [s.remaining[:n] for s in act]
    sizes = [len(sel) for sel in selected]
    offsets = list(np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)) if sizes else []
    total = int(sum(sizes))
    Y_mis = imputed = None
    if total:
        frames = np.concatenate([s.window.frames[sel] for s, sel in zip(act, selected) if sel])
        E_mis = embed(ad.const(np.zeros((total, 2))), P["embed.W_mis"], frames, D)
        Y_mis = decoder_forward(
            E_mis, Y_obs, P, cfg,
            block_allowed(sizes, sizes),
            block_allowed(sizes, obs_sizes),
            probe,
        )
        imputed = impute_head(Y_mis, P)
    return CycleOutput(active, selected, offsets, Y_obs, Y_mis, imputed)


def commit_cycle(states: list[CycleState], out: CycleOutput, keep_graph: bool = False) -> None:
    """Write a cycle's imputations back into the window states.

    With ``keep_graph`` the imputed coordinates and decoder rows stay attached
    to the tape so later cycles on the same tape differentiate through them.
    """
    L = states[out.active[0]].window.length
    for j, i in enumerate(out.active):
        s = states[i]
        y_obs_rows = ad.slice_rows(out.Y_obs, j * L, (j + 1) * L)
        s.y_obs = y_obs_rows if keep_graph else ad.stop_gradient(y_obs_rows)
        sel = out.selected[j]
        if not sel:
            continue
        o = out.offsets[j]
        for k, idx in enumerate(sel):
            coord = out.imputed.value[o + k].copy()
            s.points[idx] = coord
            s.imputed[idx] = coord
            if keep_graph:
                s.point_nodes[idx] = ad.slice_rows(out.imputed, o + k, o + k + 1)
                s.y_mis[idx] = ad.slice_rows(out.Y_mis, o + k, o + k + 1)
            else:
                s.y_mis[idx] = ad.DiffArray(out.Y_mis.value[o + k : o + k + 1].copy())
        del s.remaining[: len(sel)]
        s.cycles += 1
        s.history.append(list(sel))
        s.check()


@dataclass
class ImputationResult:
    imputed: dict[int, np.ndarray]
    Y_obs: ad.DiffArray
    Y_mis: dict[int, ad.DiffArray]
    cycles: list[list[int]]


def run_imputation_cycles(window: TrajectoryWindow, P: Params, cfg: ModelConfig, n: int,
                          tape: ad.Tape | None = None, probe: list | None = None) -> ImputationResult:
    """Impute every missing point of one window, ``n`` points per cycle in chronological order."""
    states = [CycleState.start(window)]
    out = cycle_forward(states, P, cfg, n, tape, probe, include_finished=True)
    commit_cycle(states, out, keep_graph=tape is not None)
    while not states[0].done:
        out = cycle_forward(states, P, cfg, n, tape, probe)
        commit_cycle(states, out, keep_graph=tape is not None)
    s = states[0]
    return ImputationResult(dict(s.imputed), s.y_obs, dict(s.y_mis), s.history)
