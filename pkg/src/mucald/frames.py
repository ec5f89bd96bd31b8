"""Binary wire format for split-point activations.

Layout (little-endian): magic "MCSF", version u16, round u32, client u8,
split u8, timestep u16, rank u8, extents u32 each, then the payload as
32-bit floats. Decoding is strict and reports the byte offset of the
first problem.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FrameError

FRAME_MAGIC = b"MCSF"
FRAME_VERSION = 1


@dataclass
class ActivationFrame:
    round_index: int
    client_id: int
    split: int
    timestep: int
    payload: np.ndarray  # float32, any rank

    def __post_init__(self):
        if self.split not in (1, 2):
            raise FrameError(f"frame split must be 1 or 2, got {self.split}")
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32)

    def __eq__(self, other):
        return (isinstance(other, ActivationFrame)
                and self.round_index == other.round_index
                and self.client_id == other.client_id
                and self.split == other.split
                and self.timestep == other.timestep
                and self.payload.shape == other.payload.shape
                and np.array_equal(self.payload, other.payload,
                                   equal_nan=True))


def encode_frame(frame):
    p = frame.payload
    if p.ndim > 255:
        raise FrameError(f"frame rank {p.ndim} exceeds u8")
    header = FRAME_MAGIC + struct.pack(
        "<HIBBHB", FRAME_VERSION, frame.round_index, frame.client_id,
        frame.split, frame.timestep, p.ndim)
    dims = struct.pack(f"<{p.ndim}I", *p.shape)
    return header + dims + p.astype("<f4").tobytes()


def decode_frame(blob):
    if len(blob) < 4 or blob[:4] != FRAME_MAGIC:
        raise FrameError(f"bad frame magic {blob[:4]!r} at byte offset 0")
    try:
        version, round_index, client_id, split, timestep, rank = struct.unpack_from(
            "<HIBBHB", blob, 4)
    except struct.error:
        raise FrameError("truncated frame header at byte offset 4") from None
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported frame version {version} at byte offset 4")
    offset = 4 + 11
    if len(blob) < offset + 4 * rank:
        raise FrameError(f"truncated frame dims at byte offset {offset}")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    nbytes = 4 * count
    if len(blob) < offset + nbytes:
        raise FrameError(f"truncated frame payload at byte offset {offset}: "
                         f"expected {nbytes} bytes, have {len(blob) - offset}")
    payload = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").reshape(dims)
    return ActivationFrame(round_index=round_index, client_id=client_id, split=split,
                           timestep=timestep, payload=payload.copy()), offset + nbytes


def frame_from_activation(activation, round_index, client_id, split, timestep):
    return ActivationFrame(round_index=round_index, client_id=client_id, split=split,
                           timestep=timestep,
                           payload=np.asarray(activation, dtype=np.float32))
