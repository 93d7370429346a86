"""Flat binary checkpoints.

Layout (all integers little-endian):

    8 bytes   magic b"SSATTNCK"
    u32       format version (1)
    32 bytes  sha256 of the canonical model-config JSON
    u32       config JSON length L, then L bytes of UTF-8 JSON
    u32       parameter count P, then P records of:
                u16 name length, name bytes (UTF-8)
                u8  ndim, then ndim x u32 extents
                prod(extents) x f64 values, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import SsattnError
from .model import Deraformer, ModelConfig

MAGIC = b"SSATTNCK"
VERSION = 1


class CheckpointError(SsattnError, IOError):
    pass


def _config_json(cfg: ModelConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def encode(model: Deraformer) -> bytes:
    cfg_json = _config_json(model.cfg)
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg_json).digest(),
             struct.pack("<I", len(cfg_json)), cfg_json]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Deraformer:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32)
    (n,) = struct.unpack("<I", take(4))
    cfg_json = take(n)
    if hashlib.sha256(cfg_json).digest() != digest:
        raise CheckpointError("config digest mismatch")
    cfg = ModelConfig.from_dict(json.loads(cfg_json))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    model = Deraformer(cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    return model


def save(model: Deraformer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model))
    return path


def load(path) -> Deraformer:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
