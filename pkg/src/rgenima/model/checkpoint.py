"""Single-file parameter checkpoints.

Layout (little-endian): magic ``RGMA``, u16 version, u16 config-field count,
then per config field (u16 name length, name, i64 value); u32 tensor count,
then per tensor (u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
float64 payload in C order). Tensors are written in sorted name order so
equal parameters give equal bytes.
"""
from __future__ import annotations

import struct
from dataclasses import fields

import numpy as np

from .core import ModelConfig

MAGIC = b"RGMA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _name(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, params: dict, cfg: ModelConfig) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    cfg_fields = [f.name for f in fields(ModelConfig)]
    buf += struct.pack("<H", len(cfg_fields))
    for name in cfg_fields:
        _name(buf, name)
        buf += struct.pack("<q", int(getattr(cfg, name)))
    buf += struct.pack("<I", len(params))
    for name in sorted(params):
        t = np.ascontiguousarray(params[name], dtype="<f8")
        if not np.all(np.isfinite(t)):
            raise CheckpointError(f"tensor {name} holds non-finite values")
        _name(buf, name)
        buf += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> tuple[dict, ModelConfig]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_fields,) = r.unpack("<H")
    known = {f.name for f in fields(ModelConfig)}
    values = {}
    for _ in range(n_fields):
        name = r.name()
        (v,) = r.unpack("<q")
        if name not in known:
            raise CheckpointError(f"unknown config field {name!r}")
        values[name] = v
    cfg = ModelConfig(**values)
    (n_tensors,) = r.unpack("<I")
    params = {}
    for _ in range(n_tensors):
        name = r.name()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last tensor")
    return params, cfg
