"""ALPD labeled-sample files.

Layout (little endian)::

    b"ALPD" | u32 version | u32 count
    per sample: u16 H | u16 W | rgb u8[H*W*3] | semantic u8[H*W] | depth f32[H*W]
                | u32 scene_id | u64 step
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"ALPD"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledSample:
    rgb: np.ndarray  # (H, W, 3) uint8
    semantic: np.ndarray  # (H, W) uint8
    depth: np.ndarray  # (H, W) float32
    scene_id: int
    step: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, LabeledSample) and self.scene_id == other.scene_id and self.step == other.step
                and np.array_equal(self.rgb, other.rgb) and np.array_equal(self.semantic, other.semantic)
                and self.depth.tobytes() == other.depth.tobytes())


def _record(s: LabeledSample) -> bytes:
    h, w = s.semantic.shape
    if s.rgb.shape != (h, w, 3) or s.depth.shape != (h, w):
        raise DatasetFormatError(f"inconsistent sample shapes {s.rgb.shape} {s.semantic.shape} {s.depth.shape}")
    return b"".join([
        struct.pack("<HH", h, w),
        np.ascontiguousarray(s.rgb, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(s.semantic, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(s.depth, dtype="<f4").tobytes(),
        struct.pack("<IQ", s.scene_id, s.step),
    ])


def encode(samples) -> bytes:
    samples = list(samples)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, len(samples)))
    for s in samples:
        buf.write(_record(s))
    return buf.getvalue()


def decode(data: bytes) -> list[LabeledSample]:
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise DatasetFormatError("bad magic, not an ALPD dataset")
    _, version, count = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported ALPD version {version}")
    off = _HEADER.size
    out = []
    try:
        for _ in range(count):
            h, w = struct.unpack_from("<HH", data, off)
            off += 4
            n = h * w
            rgb = np.frombuffer(data, np.uint8, n * 3, off).reshape(h, w, 3).copy()
            off += 3 * n
            sem = np.frombuffer(data, np.uint8, n, off).reshape(h, w).copy()
            off += n
            depth = np.frombuffer(data, "<f4", n, off).reshape(h, w).astype(np.float32)
            off += 4 * n
            scene_id, step = struct.unpack_from("<IQ", data, off)
            off += 12
            out.append(LabeledSample(rgb, sem, depth, scene_id, step))
    except (struct.error, ValueError) as exc:
        raise DatasetFormatError(f"truncated dataset: {exc}") from exc
    if off != len(data):
        raise DatasetFormatError(f"{len(data) - off} trailing bytes")
    return out


def read(path: str | os.PathLike) -> list[LabeledSample]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write(path: str | os.PathLike, samples) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(samples))


class DatasetWriter:
    """Append-only writer; the header count is patched on every append."""

    def __init__(self, path: str | os.PathLike):
        self.path = path
        self.count = 0
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, 0))

    def append(self, samples) -> None:
        samples = list(samples)
        if not samples:
            return
        with open(self.path, "r+b") as fh:
            fh.seek(0, os.SEEK_END)
            for s in samples:
                fh.write(_record(s))
            self.count += len(samples)
            fh.seek(0)
            fh.write(_HEADER.pack(MAGIC, VERSION, self.count))
