"""Flat little-endian binary serialization for arrays and named-array files.

Per-array layout (all integers little-endian):

    u8  dtype tag   (1 = float32, 2 = float64, 3 = int64)
    u8  rank
    u64 * rank      dimension sizes
    raw data        C order, little-endian

A named-array file is:

    magic  b"RLT1"
    u32    entry count
    entries: u16 name length, utf-8 name bytes, then one array record

Used for checkpoints; the exact layout is part of the package contract.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RLT1"

_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_KIND_TO_TAG = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3}


def write_array(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_TAG:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    tag = _KIND_TO_TAG[key]
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(fh) -> np.ndarray:
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if tag not in _TAG_TO_DTYPE:
        raise ValueError(f"unknown dtype tag {tag}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    dtype = _TAG_TO_DTYPE[tag]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def write_named(fh, arrays: dict) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        blob = name.encode("utf-8")
        fh.write(struct.pack("<H", len(blob)))
        fh.write(blob)
        write_array(fh, np.asarray(arr))


def read_named(fh) -> dict:
    out = {}
    if _read_exact(fh, 4) != MAGIC:
        raise ValueError("not a recurlm named-array block")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        out[name] = read_array(fh)
    return out


def save_arrays(path, arrays: dict) -> None:
    with open(path, "wb") as fh:
        write_named(fh, arrays)


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        return read_named(fh)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise EOFError("truncated array file")
    return data
