"""Binary checkpoints holding every parameter as little-endian float64.

Layout::

    b"MMCK"  u16 version  u32 echo_len  echo (UTF-8)  u32 n_params
    per parameter: u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f64 data[prod(dims)]

The echo is free text; the CLI stores the resolved config there plus
``#@key=json`` metadata lines (answer vocabularies).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError
from .model import DualDomainModel, ModelConfig

MAGIC = b"MMCK"
VERSION = 1
META_PREFIX = "#@"


class CheckpointError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    echo: str
    params: dict[str, np.ndarray]
    meta: dict[str, object] = field(default_factory=dict)


def encode_meta(meta: dict[str, object]) -> str:
    return "".join(f"{META_PREFIX}{k}={json.dumps(v)}\n" for k, v in meta.items())


def decode_meta(echo: str) -> dict[str, object]:
    meta = {}
    for line in echo.splitlines():
        if line.startswith(META_PREFIX) and "=" in line:
            key, value = line[len(META_PREFIX) :].split("=", 1)
            meta[key] = json.loads(value)
    return meta


def save_checkpoint(model: DualDomainModel, path, echo: str = "", meta: dict[str, object] | None = None) -> None:
    if meta:
        echo = echo + encode_meta(meta)
    buf = bytearray()
    buf += MAGIC + struct.pack("<H", VERSION)
    raw = echo.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw
    params = model.state_dict()
    buf += struct.pack("<I", len(params))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def read_checkpoint(path) -> Checkpoint:
    cur = _Cursor(Path(path).read_bytes())
    if cur.data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)", 0)
    cur.pos = 4
    (version,) = cur.unpack("H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    (echo_len,) = cur.unpack("I", "echo length")
    try:
        echo = cur.take(echo_len, "config echo").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("config echo is not UTF-8", cur.pos - echo_len) from exc
    (count,) = cur.unpack("I", "parameter count")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = cur.unpack("H", f"name length of parameter {i}")
        name = cur.take(nlen, f"name of parameter {i}").decode("utf-8")
        (rank,) = cur.unpack("B", f"rank of {name}")
        dims = cur.unpack(f"{rank}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        start = cur.pos
        data = np.frombuffer(cur.take(8 * n, f"values of {name}"), dtype="<f8").astype(np.float64).reshape(dims)
        if not np.isfinite(data).all():
            raise CheckpointError(f"parameter {name} holds non-finite values", start)
        params[name] = data
    if cur.pos != len(cur.data):
        raise CheckpointError(f"{len(cur.data) - cur.pos} trailing bytes after last parameter", cur.pos)
    return Checkpoint(echo, params, decode_meta(echo))


def check_architecture(model: DualDomainModel, params: dict[str, np.ndarray]) -> None:
    """Raise naming the first parameter whose presence or shape disagrees."""
    expected = {k: v.shape for k, v in model.state_dict().items()}
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if params[name].shape != shape:
            raise CheckpointError(f"parameter {name} has shape {params[name].shape}, model expects {shape}")
    for name in params:
        if name not in expected:
            raise CheckpointError(f"checkpoint has unexpected parameter {name}")


def load_checkpoint(path, config: ModelConfig) -> tuple[DualDomainModel, Checkpoint]:
    """Build a model with ``config`` and fill it from ``path``; mismatches raise before any assignment."""
    ckpt = read_checkpoint(path)
    model = DualDomainModel(config, seed=0)
    check_architecture(model, ckpt.params)
    model.load_state_dict(ckpt.params)
    return model, ckpt
