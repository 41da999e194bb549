"""TNS tensor blocks: ``TNS v1 <rank> <extents...>\\n`` then little-endian float64 data.

Several blocks may be concatenated in one file; readers walk them in order.
"""

from __future__ import annotations

import io
from typing import BinaryIO, Iterable

import numpy as np

from .errors import InputError

_LE_F64 = np.dtype("<f8")


def encode(array) -> bytes:
    arr = np.array(array, dtype=np.float64, order="C")
    header = "TNS v1 {} {}".format(arr.ndim, " ".join(str(n) for n in arr.shape)).rstrip()
    return header.encode("ascii") + b"\n" + arr.astype(_LE_F64, copy=False).tobytes()


def read_block(stream: BinaryIO) -> np.ndarray | None:
    line = stream.readline()
    if not line:
        return None
    parts = line.decode("ascii").split()
    if len(parts) < 3 or parts[0] != "TNS" or parts[1] != "v1":
        raise InputError(f"bad TNS header: {line[:40]!r}")
    rank = int(parts[2])
    shape = tuple(int(n) for n in parts[3:3 + rank])
    if len(shape) != rank:
        raise InputError(f"TNS header rank {rank} but {len(shape)} extents")
    count = int(np.prod(shape)) if shape else 1
    raw = stream.read(count * 8)
    if len(raw) != count * 8:
        raise InputError("truncated TNS block")
    return np.frombuffer(raw, dtype=_LE_F64).astype(np.float64).reshape(shape)


def write_blocks(path, arrays: Iterable) -> list[int]:
    """Write arrays as consecutive blocks; returns the byte offset of each block."""
    offsets = []
    with open(path, "wb") as fh:
        for arr in arrays:
            offsets.append(fh.tell())
            fh.write(encode(arr))
    return offsets


def read_blocks(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        return read_stream(fh)


def read_stream(stream: BinaryIO) -> list[np.ndarray]:
    blocks = []
    while (block := read_block(stream)) is not None:
        blocks.append(block)
    return blocks


def decode(data: bytes) -> np.ndarray:
    block = read_block(io.BytesIO(data))
    if block is None:
        raise InputError("empty TNS payload")
    return block
