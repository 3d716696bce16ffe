"""Single-file binary checkpoints.

Layout (little-endian)::

    b"TKP1"
    u32 header_len, header_len bytes of UTF-8 JSON  {"config": {...}, "meta": {...}}
    u32 n_blobs
    per blob: u16 name_len, name, u8 ndim, ndim x u32 dims, prod(dims) x f64
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"TKP1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    meta: dict[str, Any]
    blobs: dict[str, np.ndarray] = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(ckpt.blobs))]
    for name, arr in ckpt.blobs.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    try:
        pos = 4
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blobs = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            blobs[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes")
    return Checkpoint(config=header["config"], meta=header["meta"], blobs=blobs)


def save(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return loads(path.read_bytes())
