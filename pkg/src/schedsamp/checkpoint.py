"""Binary checkpoint format.

Layout (little-endian)::

    b"SSTX"  u16 version  u32 count
    count x (u16 name_len, name utf-8, u8 rank, rank x u32 dim, float32 values)
    u64 step  32-byte rng key
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SSTX"
VERSION = 1
RNG_KEY_BYTES = 32


def dumps(tensors: dict[str, np.ndarray], step: int, rng_key: bytes) -> bytes:
    if len(rng_key) != RNG_KEY_BYTES:
        raise ValueError(f"rng key must be {RNG_KEY_BYTES} bytes")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    parts.append(struct.pack("<Q", step))
    parts.append(bytes(rng_key))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                              f"{len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], int, bytes]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of entry {i}")
        try:
            name = r.take(name_len, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i}: name is not utf-8") from None
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = values.astype(np.float64)
    (step,) = r.unpack("<Q", "step")
    key = r.take(RNG_KEY_BYTES, "rng key")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return tensors, step, key


def save(path, tensors: dict[str, np.ndarray], step: int, rng_key: bytes) -> None:
    Path(path).write_bytes(dumps(tensors, step, rng_key))


def load(path) -> tuple[dict[str, np.ndarray], int, bytes]:
    return loads(Path(path).read_bytes())
