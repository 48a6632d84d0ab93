"""Checkpoint container.

Layout (all integers little-endian)::

    b"GRCKPT\\0\\0"                magic, 8 bytes
    u32 header_len, header        UTF-8 JSON: version, config, vocab, metadata, tensor names
    per tensor, in header order:
        u32 ndim, u32 * ndim dims, float32 * prod(dims)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Grounder, ModelConfig
from .vocab import Vocabulary

MAGIC = b"GRCKPT\0\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Grounder
    metadata: dict = field(default_factory=dict)
    loss_curve: list[float] = field(default_factory=list, repr=False)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.model.params)
    header = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "metadata": ckpt.metadata,
        "tensors": names,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(hb)), hb]
    for name in names:
        arr = np.ascontiguousarray(ckpt.model.params[name].data, dtype="<f4")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen])
    if "version" not in header:
        raise ValueError("checkpoint header lacks a version field")
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    off = 12 + hlen
    params = {}
    for name in header["tensors"]:
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if off != len(buf):
        raise ValueError("trailing bytes after last tensor")
    model = Grounder(ModelConfig.from_dict(header["config"]), Vocabulary(header["vocab"]),
                     dtype=np.float32, params=params)
    return Checkpoint(model, header.get("metadata", {}))


def load(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def file_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
