"""Versioned binary model files.

Layout (all integers little-endian)::

    b"INGRAINM"                     magic, 8 bytes
    uint32 version
    uint32 n, n bytes UTF-8         run configuration echo (key = value lines)
    uint32 n, n bytes UTF-8         coordinate scaler (key = value lines)
    uint32 count                    number of arrays
    count times:
        uint16 n, n bytes UTF-8     parameter name
        uint32 rows, uint32 cols
        rows * cols float64 (<f8)   row-major values

Arrays appear in parameter declaration order.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Scaler
from .params import ModelConfig, ModelParams, param_spec

MAGIC = b"INGRAINM"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """The file is not a model file, has an unknown version, or does not fit the config."""


@dataclass
class SavedModel:
    params: ModelParams
    config_text: str
    scaler: Scaler
    version: int = FORMAT_VERSION


def atomic_write(path, data: bytes | str) -> None:
    """Write via a sibling temporary file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    payload = data.encode("utf-8") if isinstance(data, str) else data
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _scaler_text(s: Scaler) -> str:
    return f"mode = {s.mode}\nlo = {s.lo[0]!r},{s.lo[1]!r}\nhi = {s.hi[0]!r},{s.hi[1]!r}\n"


def _parse_scaler(text: str) -> Scaler:
    kv = dict(line.split(" = ", 1) for line in text.splitlines() if line)
    try:
        lo = tuple(float(x) for x in kv["lo"].split(","))
        hi = tuple(float(x) for x in kv["hi"].split(","))
        return Scaler(kv["mode"], lo, hi)
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"bad scaler record: {exc}") from None


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_model(params: ModelParams, config_text: str, scaler: Scaler | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _blob(config_text),
             _blob(_scaler_text(scaler or Scaler())), struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_model(path, params: ModelParams, config_text: str, scaler: Scaler | None = None) -> None:
    atomic_write(path, encode_model(params, config_text, scaler))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("model file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode_model(data: bytes) -> SavedModel:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    config_text = r.text()
    scaler = _parse_scaler(r.text())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        rows, cols = r.unpack("<II")
        arrays[name] = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after the last array")
    return SavedModel(ModelParams(arrays), config_text, scaler, version)


def check_compatible(params: ModelParams, cfg: ModelConfig) -> None:
    """Raise ModelFormatError unless names and shapes match the configuration exactly."""
    expected = [(name, shape) for name, shape, _ in param_spec(cfg)]
    found = [(name, arr.shape) for name, arr in params.items()]
    if expected != found:
        want, got = dict(expected), dict(found)
        diffs = [f"{k}: expected {want.get(k)}, file has {got.get(k)}"
                 for k in dict.fromkeys(list(want) + list(got)) if want.get(k) != got.get(k)]
        detail = "; ".join(diffs[:5]) or "parameter order differs"
        raise ModelFormatError(f"model file (format v{FORMAT_VERSION}) does not match config: {detail}")


def load_model(path, cfg: ModelConfig | None = None) -> SavedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    saved = decode_model(data)
    if cfg is not None:
        check_compatible(saved.params, cfg)
    return saved
