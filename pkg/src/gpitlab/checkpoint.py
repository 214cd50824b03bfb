"""Flat binary checkpoint container.

Layout (all integers uint64 little-endian, all reals float64 little-endian)::

    b"GPITCKPT" | version:u8 | { name_len | utf8 name | rank | dims... | data... }*

Metadata travels as one extra entry named ``__meta__`` whose data are the
bytes of a canonical JSON document, one byte per float.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"GPITCKPT"
VERSION = 1
META_KEY = "__meta__"


def encode_checkpoint(params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    parts = [MAGIC, bytes([VERSION])]
    entries = dict(params)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(key)))
        parts.append(key)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if blob[:8] != MAGIC:
        raise ValueError("not a GPITCKPT checkpoint")
    if blob[8] != VERSION:
        raise ValueError(f"unsupported checkpoint version {blob[8]}")
    pos = 9
    params: dict[str, np.ndarray] = {}
    meta = None
    while pos < len(blob):
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * count
        if name == META_KEY:
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            params[name] = arr
    return params, meta


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    blob = encode_checkpoint(params, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    """Content hash of named parameters, independent of metadata."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
