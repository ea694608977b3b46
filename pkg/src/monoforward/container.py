"""Versioned little-endian binary container for named tensors.

Layout: magic "MFWC", u32 version, u32 metadata length, metadata (UTF-8
JSON), u64 tensor count, then per tensor: u32 name length, name bytes,
u32 rank, u64 dims, u8 precision tag (1=float32, 2=float64, 3=int64) and
the raw row-major payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MFWC"
VERSION = 1

_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_RTAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2,
          np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    """The container file is malformed or truncated."""


def write_container(path, tensors: dict, meta: dict | None = None):
    meta_bytes = json.dumps(meta or {}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _RTAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            tag = _RTAGS[arr.dtype]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(struct.pack("<B", tag))
            f.write(np.ascontiguousarray(arr).astype(_TAGS[tag]).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated container while reading {what}")
    return buf


def read_container(path):
    """Returns (tensors, meta). Raises CheckpointError on any malformation."""
    tensors = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        version, meta_len = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata") or b"{}")
        except json.JSONDecodeError as e:
            raise CheckpointError(f"bad metadata JSON: {e}") from e
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "tensor count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "dims"))
            (tag,) = struct.unpack("<B", _read_exact(f, 1, "precision tag"))
            if tag not in _TAGS:
                raise CheckpointError(f"unknown precision tag {tag} for {name!r}")
            dtype = _TAGS[tag]
            n_items = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(f, n_items * dtype.itemsize, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return tensors, meta
