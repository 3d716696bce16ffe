"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"unsupported shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(arr).tobytes()


def decode(data: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    # magic, width, height, maxval; '#' comments run to end of line
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise NetpbmError("truncated header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # exactly one whitespace byte before the raster

    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unknown magic {magic!r}")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    n = w * h * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return raster.reshape(shape).copy()


def write(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(array))
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
