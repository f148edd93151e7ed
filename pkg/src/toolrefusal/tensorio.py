"""Portable tensor container: a JSON header followed by a flat little-endian payload.

Layout: 8-byte magic, 8-byte header length (little-endian uint64), UTF-8 JSON
header, then the raw array bytes in C order. The header names every axis.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TRTENSOR"
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4"}


@dataclass
class NamedTensor:
    values: np.ndarray
    dims: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.dims) != self.values.ndim:
            raise ValueError(f"{len(self.dims)} dimension names for a {self.values.ndim}-d array")


def encode(t: NamedTensor) -> bytes:
    name = str(t.values.dtype)
    if name not in _DTYPES:
        raise TypeError(f"unsupported dtype {name}")
    header = {
        "dims": list(t.dims),
        "shape": list(t.values.shape),
        "dtype": name,
        "meta": t.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.ascontiguousarray(t.values, dtype=_DTYPES[name]).tobytes()
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def decode(raw: bytes) -> NamedTensor:
    if raw[:8] != MAGIC:
        raise ValueError("not a tensor container")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    arr = np.frombuffer(raw[16 + n:], dtype=_DTYPES[header["dtype"]]).reshape(header["shape"])
    return NamedTensor(arr.astype(header["dtype"]), tuple(header["dims"]), header.get("meta", {}))


def save(path: Path, t: NamedTensor) -> str:
    """Write atomically; returns the sha256 of the bytes written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(t)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load(path: Path) -> NamedTensor:
    return decode(Path(path).read_bytes())
