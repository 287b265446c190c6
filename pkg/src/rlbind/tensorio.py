"""Bit-exact binary container for named float64 tensors.

Layout::

    b"RLBD" | u32 LE version (=1) | u32 LE manifest length | manifest (UTF-8 JSON)
    | tensor 0 as LE float64 | tensor 1 ... (manifest order)

The manifest is a JSON object ``{"meta": {...}, "tensors": [[name, shape], ...]}``
serialized with sorted keys so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RLBD"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class ContainerError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append([name, list(arr.shape)])
        blobs.append(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    mbytes = manifest.encode("utf-8")
    header = MAGIC + struct.pack("<II", VERSION, len(mbytes))
    return header + mbytes + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 12:
        raise ContainerError("container truncated: header incomplete")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, mlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    if len(buf) < 12 + mlen:
        raise ContainerError("container truncated inside manifest")
    try:
        manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
        entries = manifest["tensors"]
        meta = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerError(f"corrupt manifest: {exc}") from None

    out: dict[str, np.ndarray] = {}
    offset = 12 + mlen
    for name, shape in entries:
        if any(int(s) < 0 for s in shape):
            raise ContainerError(f"tensor {name!r} has negative extent in shape {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if offset + nbytes > len(buf):
            raise ContainerError(f"container truncated inside tensor {name!r}")
        arr = np.frombuffer(buf, dtype=_LE_F64, count=count, offset=offset)
        out[name] = arr.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(buf):
        raise ContainerError(f"{len(buf) - offset} trailing bytes after last tensor")
    return out, meta


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(tensors, meta))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
