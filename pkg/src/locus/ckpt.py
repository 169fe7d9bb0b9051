"""Checkpoint container: magic, version, JSON config blob, named tensors.

Layout (all integers little-endian):
  "LOCUSCKPT" | u32 version | u64 blob_len | blob (UTF-8 JSON)
  u32 n_tensors, then per tensor:
  u32 name_len | name | u32 rank | u32 shape[rank] | f32 payload
Tensors are written in sorted-name order so round-trips are byte-exact.
The digest is the sha256 of the tensor section.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .data import ValidationError

MAGIC = b"LOCUSCKPT"
VERSION = 1


def _tensor_section(arrays):
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def tensor_digest(arrays):
    return hashlib.sha256(_tensor_section(arrays)).hexdigest()


def write_checkpoint(path, config_blob: dict, arrays):
    section = _tensor_section(arrays)
    blob = json.dumps(config_blob, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(section)
    return hashlib.sha256(section).hexdigest()


def read_checkpoint(path):
    """Returns (config_blob, {name: float32 array}, digest)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    blob = json.loads(raw[off:off + blob_len].decode())
    off += blob_len
    section = raw[off:]
    digest = hashlib.sha256(section).hexdigest()

    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode()
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(
            raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(raw):
        raise ValidationError("trailing bytes after tensor section")
    return blob, arrays, digest
