"""Versioned binary container: a JSON header followed by raw little-endian arrays.

Layout::

    b"ATBLOB" | u8 container version | u32 header length | header JSON | array bytes

The header carries a ``kind`` tag, a ``format_version`` owned by the caller,
an ``arrays`` manifest (name, dtype, shape, offset, nbytes) and any extra
metadata the caller supplies. Writing is deterministic: identical inputs give
identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import SerializationError, VersionMismatchError

MAGIC = b"ATBLOB"
CONTAINER_VERSION = 1


def _canonical(a: Any) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    elif arr.dtype.kind in "iu":
        arr = arr.astype("<i8")
    elif arr.dtype.kind == "b":
        arr = arr.astype("|u1")
    else:
        raise SerializationError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr)


def encode(kind: str, format_version: int, arrays: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        arr = _canonical(value)
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": kind, "format_version": format_version, "arrays": manifest,
              "meta": dict(meta or {})}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<BI", CONTAINER_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode(data: bytes, kind: str, format_version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container, validating magic, kind and version before touching arrays."""
    if len(data) < len(MAGIC) + 5 or not data.startswith(MAGIC):
        raise SerializationError("bad magic: not an active_tactile blob")
    cver, hlen = struct.unpack_from("<BI", data, len(MAGIC))
    if cver != CONTAINER_VERSION:
        raise VersionMismatchError("container", CONTAINER_VERSION, cver)
    start = len(MAGIC) + 5
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f"corrupted header: {exc}") from exc
    if not isinstance(header, dict) or "arrays" not in header:
        raise SerializationError("corrupted header: missing array manifest")
    if header.get("kind") != kind:
        raise SerializationError(f"expected a {kind!r} blob, found {header.get('kind')!r}")
    if header.get("format_version") != format_version:
        raise VersionMismatchError(kind, format_version, header.get("format_version"))
    body = data[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(body):
            raise SerializationError(f"truncated array {entry['name']!r}")
        arr = np.frombuffer(body[lo:lo + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def write(path: str | os.PathLike, blob: bytes) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read(path: str | os.PathLike, kind: str, format_version: int) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), kind, format_version)
