"""Versioned little-endian container for named arrays plus JSON metadata.

Layout::

    magic (4 bytes) | version u16 | header length u32 | header JSON (utf-8)
    | array payloads, little-endian, concatenated in header order

The header lists ``[name, dtype, shape]`` for every array.
"""
from __future__ import annotations

import json
import struct

import numpy as np


class FormatError(ValueError):
    pass


def pack(magic: bytes, version: int, meta: dict, arrays: dict) -> bytes:
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append([name, le.dtype.str, list(arr.shape)])
        payload.append(np.ascontiguousarray(le).tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    return b"".join([magic, struct.pack("<HI", version, len(header)), header, *payload])


def unpack(blob: bytes, magic: bytes, version: int):
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 10:
        raise FormatError("truncated header")
    got, hlen = struct.unpack_from("<HI", blob, 4)
    if got != version:
        raise FormatError(f"unsupported format version {got} (expected {version})")
    start = 10 + hlen
    if len(blob) < start:
        raise FormatError("truncated header")
    header = json.loads(blob[10:start].decode())
    arrays = {}
    pos = start
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + count * dt.itemsize
        if end > len(blob):
            raise FormatError(f"truncated payload at array {name!r}")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(shape).astype(
            dt.newbyteorder("="))
        pos = end
    if pos != len(blob):
        raise FormatError("trailing bytes after payload")
    return header["meta"], arrays
