"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"SITCOMCK"
    version    uint32    FORMAT_VERSION
    header_len uint64    length of the JSON header in bytes
    header     UTF-8 JSON {"meta": {...}, "arrays": [{"name": str, "shape": [int, ...]}, ...]}
    payload    float64 little-endian values of each array, in header order, C order
    checksum   32 bytes  SHA-256 of every preceding byte

Files are written to a temporary sibling and renamed into place, so a crash
mid-write never leaves a half-written checkpoint under the final name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SITCOMCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(Exception):
    """Unreadable, corrupted, or incompatible checkpoint."""


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = [{"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint truncated")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated)")
    start = _PREFIX.size
    header = json.loads(body[start : start + header_len])
    offset = start + header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(body):
            raise CheckpointError("checkpoint payload truncated")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return header["meta"], arrays


def save(path: str | os.PathLike, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(meta, arrays))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
