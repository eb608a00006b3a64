"""Flat ``key = value`` run configuration.

A config file holds one assignment per line; ``#`` starts a comment. Values
given with ``--set key=value`` override the file, and a named profile (the
``profile`` key) supplies defaults underneath both. One key may be marked as
a sweep axis with ``sweep.<key> = v1, v2, ...``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import MaskSpec, SynthProfile
from .losses import LossWeights
from .params import SUPPLEMENT_MODES, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration key is unknown, malformed or out of range."""


PROFILES = {
    "full": {},
    "desk": {"embed_dim": 32, "hidden_size": 32, "batch_size": 8},
}


@dataclass(frozen=True)
class RunConfig:
    profile: str = "full"
    # windows and data
    window_length: int = 20
    stride: int = 0
    normalization: str = "minmax"
    train_fraction: float = 0.8
    split_seed: int = 0
    # masking
    missing_rate: float = 0.5
    mask_distribution: str = "uniform"
    mask_seed: int = 0
    remask_each_epoch: bool = True
    eval_missing_rates: tuple[float, ...] = ()
    # model
    embed_dim: int = 256
    heads: int = 2
    layers: int = 2
    hidden_size: int = 256
    ff_mult: int = 4
    points_per_cycle: int = 1
    supplement_mode: str = "replace"
    use_rnn: bool = True
    reencode_per_cycle: bool = True
    # objective
    lambda_imp: float = 1.0
    lambda_pre: float = 1.0
    lambda_vel: float = 0.0
    squared_loss: bool = False
    vel_literal: bool = False
    # optimisation
    lr: float = 0.001
    batch_size: int = 70
    epochs: int = 60
    clip_norm: float = 5.0
    step_per_window: bool = False
    eval_every: int = 1
    seeds: tuple[int, ...] = (0,)
    # baselines
    knn_k: int = 4
    train_sgru: bool = False
    sgru_epochs: int = 60
    # synthetic data
    synth_walkers: int = 500
    synth_points: int = 21
    synth_motion: str = "smooth-random-walk"
    synth_noise: float = 2e-3
    synth_seed: int = 0
    # sweep axis (key, values) or None
    sweep: tuple | None = field(default=None, compare=True)

    def __post_init__(self):
        checks = [
            (self.profile in PROFILES, "profile", f"one of {sorted(PROFILES)}"),
            (self.window_length >= 2, "window_length", ">= 2"),
            (self.stride >= 0, "stride", ">= 0 (0 means window_length)"),
            (self.normalization in ("none", "minmax"), "normalization", "none or minmax"),
            (0.0 < self.train_fraction < 1.0, "train_fraction", "in (0, 1)"),
            (0.0 <= self.missing_rate < 1.0, "missing_rate", "in [0, 1)"),
            (all(0.0 <= r < 1.0 for r in self.eval_missing_rates), "eval_missing_rates", "rates in [0, 1)"),
            (self.mask_distribution in ("uniform", "poisson"), "mask_distribution", "uniform or poisson"),
            (self.embed_dim >= 2, "embed_dim", ">= 2"),
            (self.heads >= 1 and self.embed_dim % self.heads == 0, "heads", "a positive divisor of embed_dim"),
            (self.layers >= 1, "layers", ">= 1"),
            (self.hidden_size >= 1, "hidden_size", ">= 1"),
            (self.ff_mult >= 1, "ff_mult", ">= 1"),
            (self.points_per_cycle >= 1, "points_per_cycle", ">= 1"),
            (self.supplement_mode in SUPPLEMENT_MODES, "supplement_mode", f"one of {SUPPLEMENT_MODES}"),
            (min(self.lambda_imp, self.lambda_pre, self.lambda_vel) >= 0, "lambda_imp", "non-negative weights"),
            (self.lambda_imp + self.lambda_pre + self.lambda_vel > 0, "lambda_imp", "at least one positive weight"),
            (self.lr > 0, "lr", "> 0"),
            (self.batch_size >= 1, "batch_size", ">= 1"),
            (self.epochs >= 0, "epochs", ">= 0"),
            (self.clip_norm >= 0, "clip_norm", ">= 0 (0 disables)"),
            (self.eval_every >= 0, "eval_every", ">= 0 (0 means last epoch only)"),
            (len(self.seeds) >= 1, "seeds", "at least one seed"),
            (self.knn_k >= 1, "knn_k", ">= 1"),
            (self.sgru_epochs >= 0, "sgru_epochs", ">= 0"),
            (self.synth_walkers >= 0, "synth_walkers", ">= 0"),
            (self.synth_points >= self.window_length + 1, "synth_points", ">= window_length + 1"),
            (self.synth_motion in ("smooth-random-walk", "periodic-loop"), "synth_motion",
             "smooth-random-walk or periodic-loop"),
            (self.synth_noise >= 0, "synth_noise", ">= 0"),
        ]
        for ok, key, need in checks:
            if not ok:
                raise ConfigError(f"{key}: must be {need}")

    # -- derived objects -------------------------------------------------

    @property
    def effective_stride(self) -> int:
        return self.stride or self.window_length

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, heads=self.heads, layers=self.layers,
            hidden_size=self.hidden_size, ff_mult=self.ff_mult,
            supplement_mode=self.supplement_mode, use_rnn=self.use_rnn,
            reencode_per_cycle=self.reencode_per_cycle,
        )

    def mask_spec(self, rate: float | None = None) -> MaskSpec:
        return MaskSpec(self.missing_rate if rate is None else rate, self.mask_distribution, self.mask_seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            model=self.model_config(),
            points_per_cycle=self.points_per_cycle,
            weights=LossWeights(self.lambda_imp, self.lambda_pre, self.lambda_vel),
            squared_loss=self.squared_loss,
            vel_literal=self.vel_literal,
            step_per_window=self.step_per_window,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            clip_norm=self.clip_norm,
            mask=self.mask_spec(),
            remask_each_epoch=self.remask_each_epoch,
            eval_every=self.eval_every,
            seed=seed,
        )

    def synth_profile(self) -> SynthProfile:
        return SynthProfile(self.synth_walkers, self.synth_points, self.synth_motion, noise_scale=self.synth_noise)

    def replace(self, **changes) -> "RunConfig":
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        """Canonical ``key = value`` lines (every key, declaration order)."""
        lines = []
        for f in fields(self):
            if f.name == "sweep":
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        if self.sweep is not None:
            key, values = self.sweep
            lines.append(f"sweep.{key} = {_format(tuple(values))}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "sweep"}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_scalar(key: str, kind: str, text: str):
    try:
        if kind == "bool":
            return _parse_bool(key, text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    return text.strip()


def _kind(key: str) -> tuple[str, bool]:
    """(element type name, is-list) for a field."""
    ann = str(_FIELDS[key].type)
    if ann.startswith("tuple"):
        return ("int" if "int" in ann else "float"), True
    return ann, False


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind, is_list = _kind(key)
    text = text.strip()
    if is_list:
        if not text:
            return ()
        return tuple(_parse_scalar(key, kind, part.strip()) for part in text.split(","))
    return _parse_scalar(key, kind, text)


def parse_assignments(lines, source: str = "<config>") -> tuple[dict, dict]:
    """Split ``key = value`` lines into plain assignments and sweep axes."""
    values, sweeps = {}, {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key.startswith("sweep."):
            axis = key[len("sweep."):]
            if axis not in _FIELDS or axis in ("seeds", "profile", "eval_missing_rates"):
                raise ConfigError(f"{source}:{n}: cannot sweep over {axis!r}")
            kind, _ = _kind(axis)
            parts = [p for p in text.split(",") if p.strip()]
            if not parts:
                raise ConfigError(f"{source}:{n}: sweep.{axis} needs at least one value")
            sweeps[axis] = tuple(_parse_scalar(axis, kind, p.strip()) for p in parts)
        else:
            try:
                values[key] = parse_value(key, text)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
    return values, sweeps


def build_config(values: dict, sweeps: dict | None = None, profile: str | None = None) -> RunConfig:
    """Layer defaults, then the profile, then explicit ``values``."""
    sweeps = sweeps or {}
    if len(sweeps) > 1:
        raise ConfigError(f"only one sweep axis allowed, got {sorted(sweeps)}")
    name = profile or values.get("profile", "full")
    if name not in PROFILES:
        raise ConfigError(f"profile: must be one of {sorted(PROFILES)}, got {name!r}")
    merged = dict(PROFILES[name])
    merged.update(values)
    merged["profile"] = name
    sweep = next(iter(sweeps.items())) if sweeps else None
    cfg = RunConfig(**merged, sweep=sweep)
    if sweep is not None:
        for v in sweep[1]:
            cfg.replace(**{sweep[0]: v})  # validate every axis value up front
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None, profile: str | None = None) -> RunConfig:
    """Read a config file (optional), apply ``key=value`` overrides and an optional single seed."""
    values, sweeps = {}, {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values, sweeps = parse_assignments(text.splitlines(), str(path))
    more_values, more_sweeps = parse_assignments(overrides, "--set")
    values.update(more_values)
    sweeps.update(more_sweeps)
    if seed is not None:
        values["seeds"] = (int(seed),)
    return build_config(values, sweeps, profile)
