"""Parameter checkpoint files.

Layout: magic ``MCSF``, version u16, then for each tensor in declared
module order: rank u8, extents u32 each, payload of 64-bit little-endian
floats. Tensors are read back until end of file.
"""
from __future__ import annotations

import struct

import numpy as np

from ..exceptions import FrameError

MAGIC = b"MCSF"
VERSION = 1


def dump_tensors(arrays) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim > 255:
            raise FrameError(f"tensor rank {arr.ndim} exceeds u8")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def parse_tensors(blob: bytes):
    if blob[:4] != MAGIC:
        raise FrameError(f"bad checkpoint magic {blob[:4]!r} at byte offset 0")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FrameError(f"unsupported checkpoint version {version} at byte offset 4")
    offset = 6
    arrays = []
    while offset < len(blob):
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise FrameError(f"truncated checkpoint payload at byte offset {offset}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(dims)
        arrays.append(arr.astype(np.float64))
        offset += nbytes
    return arrays


def save_tensors(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dump_tensors(arrays))


def load_tensors(path):
    with open(path, "rb") as fh:
        return parse_tensors(fh.read())
