"""Little-endian binary container helpers."""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError


def write_magic(fh: BinaryIO, magic: bytes) -> None:
    fh.write(magic)


def read_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")


def write_u32(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def read_u32(fh: BinaryIO, count: int = 1):
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError("truncated header")
    values = struct.unpack(f"<{count}I", raw)
    return values[0] if count == 1 else values


def write_f32(fh: BinaryIO, array) -> None:
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_f32(fh: BinaryIO, count: int) -> np.ndarray:
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"truncated payload: expected {count} floats")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)
