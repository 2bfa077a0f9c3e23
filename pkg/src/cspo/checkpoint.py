"""Named-tensor archive.

Layout (all integers little-endian)::

    b"CSPOCKPT"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON (sorted keys)
    u32 n_tensors
    per tensor, sorted by name:
        u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims,
        prod(dims) x float32 payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"CSPOCKPT"
VERSION = 1


def encode_archive(tensors: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        value = tensors[name]
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_archive(blob: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a CSPO checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos += 4
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(blob):
        raise DataError("trailing bytes in checkpoint")
    return tensors, meta


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path, tensors: dict, meta: dict | None = None) -> str:
    """Write atomically; returns the sha256 hex digest used as checkpoint id."""
    blob = encode_archive(tensors, meta)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    return decode_archive(path.read_bytes())
