"""Binary checkpoint format.

Layout, all integers little-endian::

    b"TICFM1"  u32 version  u32 n_tensors
    n_tensors x (u32 name_len, name, u32 rank, u64 dims..., f64 payload row-major)
    u32 config_len, UTF-8 "key=value" lines

The config block carries every architecture field, the byte order and a
digest of the architecture, which is checked on load.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, ModelParams, expected_shapes
from .errors import IntegrityError, StorageError

MAGIC = b"TICFM1"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _config_text(config: ModelConfig) -> bytes:
    lines = [f"{k}={v}" for k, v in config.to_dict().items()]
    lines += ["byteorder=little", f"config_digest={config.digest()}"]
    return ("\n".join(lines) + "\n").encode("utf-8")


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(params.tensors))]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U64.pack(d) for d in arr.shape]
        parts.append(arr.tobytes(order="C"))
    cfg = _config_text(params.config)
    parts += [_U32.pack(len(cfg)), cfg]
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write ``params`` (weights plus their config); tensors are stored in name order."""
    data = checkpoint_bytes(params)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def parse_checkpoint(data: bytes) -> ModelParams:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise IntegrityError("not a checkpoint: bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        shape = tuple(r.u64(f"shape of {name}") for _ in range(r.u32(f"rank of {name}")))
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(8 * n, f"payload of {name}")
        if name in tensors:
            raise IntegrityError(f"tensor {name} stored twice")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    text = r.take(r.u32("config length"), "config block").decode("utf-8")
    if r.pos != len(data):
        raise IntegrityError(f"{len(data) - r.pos} trailing bytes after config block")
    values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    try:
        config = ModelConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise IntegrityError(f"invalid config block: {exc}") from exc
    if values.get("config_digest", config.digest()) != config.digest():
        raise IntegrityError("config digest does not match the stored hyperparameters")

    expected = expected_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise IntegrityError(f"tensor {name} missing from checkpoint")
        if tensors[name].shape != tuple(shape):
            raise IntegrityError(
                f"tensor {name} has shape {tensors[name].shape}, config expects {tuple(shape)}"
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise IntegrityError(f"unexpected tensor {extra[0]} in checkpoint")
    return ModelParams(config, tensors)


def load_checkpoint(path) -> ModelParams:
    """Read and validate a checkpoint; the config travels on the returned params."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)
