"""Little-endian binary tensor blocks and streaming transcript files.

Tensor block layout (all integers little-endian):

    magic   4 bytes  b"SSTB"
    version u8       1
    dtype   u8       0 = uint8, 1 = float32, 2 = int64
    ndim    u8
    pad     u8       0
    dims    ndim * u32
    payload row-major bytes

A transcript file is a sequence of records, each:

    iteration u32 | tag_len u8 | tag utf-8 | tensor block

This is the documented on-disk layout for dataset caches and for
persisted protocol transcripts (offline attack replay).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSTB"
VERSION = 1

_DTYPES = {0: np.uint8, 1: np.float32, 2: np.int64}
_CODES = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


def write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BBBB", VERSION, _CODES[arr.dtype], arr.ndim, 0))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_array(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    version, code, ndim, _ = struct.unpack("<BBBB", fh.read(4))
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    n = int(np.prod(dims)) if dims else 1
    data = fh.read(n * dtype.itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(_DTYPES[code])


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)


class TranscriptWriter:
    """Appends (iteration, tag, tensor) records to a stream file."""

    def __init__(self, path):
        self._fh = open(path, "wb")

    def append(self, iteration: int, tag: str, arr: np.ndarray) -> None:
        tag_bytes = tag.encode()
        self._fh.write(struct.pack("<IB", iteration, len(tag_bytes)))
        self._fh.write(tag_bytes)
        write_array(self._fh, arr)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_transcript(path):
    """Yield (iteration, tag, array) records from a transcript file."""
    with open(path, "rb") as fh:
        while True:
            head = fh.read(5)
            if not head:
                return
            iteration, tag_len = struct.unpack("<IB", head)
            tag = fh.read(tag_len).decode()
            yield iteration, tag, read_array(fh)
