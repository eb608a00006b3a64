"""Model hyperparameters and the ordered collection of learnable weights."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad

SUPPLEMENT_MODES = ("replace", "add", "none")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 256
    heads: int = 2
    layers: int = 2
    hidden_size: int = 256
    ff_mult: int = 4
    supplement_mode: str = "replace"
    use_rnn: bool = True
    reencode_per_cycle: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}"
            )
        if self.embed_dim < 2 or self.layers < 1 or self.hidden_size < 1 or self.ff_mult < 1:
            raise ValueError("embed_dim >= 2, layers >= 1, hidden_size >= 1, ff_mult >= 1 required")
        if self.supplement_mode not in SUPPLEMENT_MODES:
            raise ValueError(f"supplement_mode must be one of {SUPPLEMENT_MODES}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def ff_dim(self) -> int:
        return self.ff_mult * self.embed_dim

    def as_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Named float64 matrices in declaration order.

    All matrices are views into one contiguous buffer (``flat``) so optimizer
    updates are single vector operations.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in (arrays or {}).items()}
        for k, v in arrays.items():
            if v.ndim != 2:
                raise ValueError(f"parameter {k} must be 2-D, got shape {v.shape}")
        self.flat = np.concatenate([v.ravel() for v in arrays.values()]) if arrays else np.zeros(0)
        self.arrays: dict[str, np.ndarray] = {}
        o = 0
        for k, v in arrays.items():
            self.arrays[k] = self.flat[o : o + v.size].reshape(v.shape)
            o += v.size

    def flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Concatenate a per-name dict in this collection's order."""
        return np.concatenate([np.asarray(grads[k]).ravel() for k in self.arrays])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name][...] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.arrays if k.startswith(prefix)]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def size(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def lift(self, tape: ad.Tape) -> dict[str, ad.DiffArray]:
        return {k: tape.param(k, v) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, ad.DiffArray]:
        return {k: ad.DiffArray(v) for k, v in self.arrays.items()}

    def equals(self, other: "ModelParams") -> bool:
        return list(self.arrays) == list(other.arrays) and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()
        )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _attention_block(spec: list, prefix: str, cfg: ModelConfig) -> None:
    D, dk = cfg.embed_dim, cfg.head_dim
    for i in range(cfg.heads):
        spec.append((f"{prefix}.WQ{i}", (D, dk), "w"))
        spec.append((f"{prefix}.WK{i}", (D, dk), "w"))
        spec.append((f"{prefix}.WV{i}", (D, dk), "w"))
    spec.append((f"{prefix}.WO", (cfg.heads * dk, D), "w"))


def _norm_block(spec: list, prefix: str, D: int) -> None:
    spec.append((f"{prefix}.gain", (1, D), "one"))
    spec.append((f"{prefix}.bias", (1, D), "zero"))


def _ff_block(spec: list, prefix: str, cfg: ModelConfig) -> None:
    D, F = cfg.embed_dim, cfg.ff_dim
    spec += [
        (f"{prefix}.W1", (D, F), "w"),
        (f"{prefix}.b1", (1, F), "zero"),
        (f"{prefix}.W2", (F, D), "w"),
        (f"{prefix}.b2", (1, D), "zero"),
    ]


def param_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, int], str]]:
    """(name, shape, init kind) for every weight, in declaration order."""
    D, H = cfg.embed_dim, cfg.hidden_size
    spec: list = [("embed.W_obs", (2, D), "w"), ("embed.W_mis", (2, D), "w")]
    for l in range(cfg.layers):
        _attention_block(spec, f"enc{l}.self", cfg)
        _norm_block(spec, f"enc{l}.ln1", D)
        _ff_block(spec, f"enc{l}.ff", cfg)
        _norm_block(spec, f"enc{l}.ln2", D)
    for l in range(cfg.layers):
        _attention_block(spec, f"dec{l}.self", cfg)
        _norm_block(spec, f"dec{l}.ln1", D)
        _attention_block(spec, f"dec{l}.cross", cfg)
        _norm_block(spec, f"dec{l}.ln2", D)
        _ff_block(spec, f"dec{l}.ff", cfg)
        _norm_block(spec, f"dec{l}.ln3", D)
    spec += [("impute.W", (D, 2), "w"), ("impute.b", (1, 2), "zero")]
    if cfg.use_rnn:
        for gate in ("f", "r", "c"):
            spec += [
                (f"gru.W_{gate}x", (D, H), "w"),
                (f"gru.W_{gate}h", (H, H), "w"),
                (f"gru.b_{gate}", (1, H), "zero"),
            ]
        spec += [("predict.W", (H, 2), "w"), ("predict.b", (1, 2), "zero")]
    else:
        spec += [("predict.W", (D, 2), "w"), ("predict.b", (1, 2), "zero")]
    return spec


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Matrices ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases 0; norm gains 1."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape, kind in param_spec(cfg):
        if kind == "w":
            out[name] = _uniform(rng, shape[0], shape)
        elif kind == "one":
            out[name] = np.ones(shape)
        else:
            out[name] = np.zeros(shape)
    return ModelParams(out)


def imputer_exclusive(cfg: ModelConfig) -> list[str]:
    """Parameters that can only influence the imputed coordinates, not the prediction."""
    names = ["impute.W", "impute.b"]
    if cfg.supplement_mode == "none":
        names = ["embed.W_mis"] + [n for n, _, _ in param_spec(cfg) if n.startswith("dec")] + names
    return names


def prediction_exclusive(cfg: ModelConfig) -> list[str]:
    return [n for n, _, _ in param_spec(cfg) if n.startswith(("gru.", "predict."))]
