"""MNCP checkpoint format.

Layout (all integers little-endian)::

    b"MNCP" | u32 version (=1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f64 * prod(dims)
    u32 config length | UTF-8 "key=value\\n" lines

Tensors are written in the order given; config keys are sorted so that the
same state always serializes to the same bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MNCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict, config: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name} has too many dimensions")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    lines = "".join(f"{k}={_fmt(v)}\n" for k, v in sorted((config or {}).items()))
    for k in (config or {}):
        if "=" in k or "\n" in k:
            raise CheckpointError(f"invalid config key {k!r}")
    raw_cfg = lines.encode("utf-8")
    parts.append(struct.pack("<I", len(raw_cfg)) + raw_cfg)
    return b"".join(parts)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    text = str(v)
    if "\n" in text:
        raise CheckpointError("config values must be single-line")
    return text


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> tuple[dict, dict]:
    """Parse checkpoint bytes into (tensors, config); config values stay strings."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(dims)
    (cfg_len,) = r.unpack("<I")
    text = r.take(cfg_len).decode("utf-8")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    config = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        config[key] = value
    return tensors, config


def save(path, tensors: dict, config: dict | None = None) -> bytes:
    raw = dumps(tensors, config)
    Path(path).write_bytes(raw)
    return raw


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())
