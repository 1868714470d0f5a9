"""Single-file parameter archive.

Layout: the 8-byte magic ``KTARCH01``, a little-endian uint64 giving the
manifest length, the UTF-8 JSON manifest, then each tensor as raw
little-endian float64 values in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KTARCH01"


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape, dtype=np.int64)) * 8
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter archive")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n].decode("utf-8"))
    body = memoryview(data)[16 + n:]
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        block = np.frombuffer(body[start:start + count * 8], dtype="<f8")
        tensors[entry["name"]] = block.astype(np.float64).reshape(shape)
    return tensors, manifest["meta"]
