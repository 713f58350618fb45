"""Named-tensor binary container (``.ux2c``).

Layout, all integers little-endian::

    b"UX2C"                    magic
    u32                        format version (currently 1)
    u32                        tensor count
    per tensor:
        u16 + bytes            UTF-8 name
        u8                     rank
        u32 * rank             dims
        u8                     dtype tag (0 = f32, 1 = f64)
        raw payload            row-major little-endian IEEE-754

Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

MAGIC = b"UX2C"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContractError(f"{name}: name or rank too large for the container")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", _TAGS[dt]))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ContractError("not a UX2C container (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ContractError(f"unsupported container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        (tag,) = struct.unpack_from("<B", view, pos)
        pos += 1
        if tag not in _DTYPES:
            raise ContractError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(view):
            raise ContractError(f"{name}: truncated payload")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(view):
        raise ContractError("trailing bytes after last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
