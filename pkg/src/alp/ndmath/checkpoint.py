"""ALPW parameter checkpoints.

Layout (little endian)::

    b"ALPW" | u32 version | u32 count
    per entry: u16 name_len | name (utf-8) | u8 rank | u32 extent * rank | f32 values
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"ALPW"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointFormatError(f"name too long: {name[:32]}...")
        a = np.asarray(arr, dtype="<f4").copy(order="C")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def decode(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not an ALPW checkpoint")
    if len(data) < 12:
        raise CheckpointFormatError("truncated ALPW header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported ALPW version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointFormatError(f"{len(data) - off} trailing bytes")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(entries))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def state_entries(module) -> dict[str, np.ndarray]:
    """Named float32 arrays for every parameter and float buffer of a torch module."""
    out = {}
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[name] = t.detach().cpu().numpy().astype(np.float32)
    return out
