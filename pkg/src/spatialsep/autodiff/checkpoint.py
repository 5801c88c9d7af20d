"""Checkpoint files: named float64 arrays behind a versioned JSON header.

Layout (all integers little-endian)::

    b"SPSEPCKP"  uint32 version  uint32 header_len  header (UTF-8 JSON)
    raw little-endian float64 array payloads, in header order
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..errors import DataError

MAGIC = b"SPSEPCKP"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    meta = dict(header)
    meta["arrays"] = entries
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise DataError(f"{os.fspath(path)} is not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + count * 8 > len(data):
            raise DataError(f"checkpoint truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            data, dtype="<f8", count=count, offset=start).reshape(entry["shape"]).astype(np.float64)
    return arrays, header
