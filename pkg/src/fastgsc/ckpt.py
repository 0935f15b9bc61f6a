"""Checkpoint files: JSON header plus flat little-endian float32 payload.

Layout: 8-byte magic, uint32 (LE) header length, UTF-8 JSON header, then the
named arrays concatenated as ``<f4``. The header records each array's name,
shape and offset (in elements) plus caller-supplied metadata, so a file is
self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"FGSCKPT1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray],
                    meta: Mapping[str, Any]) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += flat.size
        blobs.append(flat.tobytes())
    header = json.dumps({"meta": dict(meta), "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[start + hlen :], dtype="<f4")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = payload[entry["offset"] : entry["offset"] + size]
        arrays[entry["name"]] = chunk.astype(float).reshape(shape)
    return arrays, header["meta"]
