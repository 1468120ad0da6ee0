"""Sectioned binary container: magic, version, then named f32 blocks.

Block layout: u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims,
row-major little-endian f32 data.  JSON metadata travels as a block of
byte values stored one per f32.
"""
import json
import struct

import numpy as np

from .io import atomic_write_bytes

MAGIC = b"GAVK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_blocks(blocks: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_blocks(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last block")
    return out


def json_block(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)


def read_json_block(arr) -> dict:
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


def write_blocks(path, blocks: dict) -> None:
    atomic_write_bytes(path, encode_blocks(blocks))


def read_blocks(path) -> dict:
    with open(path, "rb") as fh:
        return decode_blocks(fh.read())
