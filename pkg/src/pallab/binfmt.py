"""Named float64 block container used for weight checkpoints.

Layout (little-endian): 4-byte magic, u32 version, u32 header length, UTF-8
JSON header listing the blocks (name and shape, in file order), the blocks as
row-major f64, then a CRC32 of every preceding byte.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dump_blocks(magic: bytes, header: dict, blocks: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["blocks"] = [[name, list(arr.shape)] for name, arr in blocks.items()]
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    body = [magic, struct.pack("<II", VERSION, len(meta)), meta]
    body += [np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in blocks.values()]
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data))


def load_blocks(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != magic:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < 16:
        raise CheckpointFormatError("truncated checkpoint")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointFormatError("checksum mismatch")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    header = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    pos = 12 + mlen
    blocks = {}
    for name, shape in header.pop("blocks"):
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        blocks[name] = arr.reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data) - 4:
        raise CheckpointFormatError("block sizes disagree with file length")
    return header, blocks


def write_blocks(path, magic: bytes, header: dict, blocks: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_blocks(magic, header, blocks))


def read_blocks(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return load_blocks(Path(path).read_bytes(), magic)
