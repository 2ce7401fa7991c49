"""Binary checkpoints: named parameter arrays plus the JSON config that produced them.

Layout (little-endian)::

    b"MODC" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype (0 = f64, 1 = f32) | u8 rank | u32 dims[rank] | payload
    u32 config length | UTF-8 JSON config
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MODC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict, dtype: int = 0) -> None:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {dtype}")
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(arrays))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", dtype, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Arrays (always as float64) and the config dict."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    arrays = {}
    for _ in range(count):
        (n,) = take("<H")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = take(f"<{rank}I")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arrays[name] = np.frombuffer(data, _DTYPES[code], int(np.prod(shape, dtype=np.int64)), pos) \
            .reshape(shape).astype(np.float64)
        pos += nbytes
    (n,) = take("<I")
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    return arrays, config
