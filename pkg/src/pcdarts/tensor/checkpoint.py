"""Flat binary container of named arrays.

Layout (little-endian)::

    b"PCNT"  u32 version  u32 count
    repeated count times:
        u32 name_len  name (UTF-8)  u32 rank  u64 extent * rank  u8 dtype  raw data
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"PCNT"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", _TAGS[dt]))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic, not a PCNT checkpoint")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = read("<I")
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = read("<I")
        shape = read(f"<{rank}Q") if rank else ()
        (tag,) = read("<B")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated data for {name!r} at byte {pos}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    return out


def save(path, tensors: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
