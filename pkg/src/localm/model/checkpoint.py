"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic   b"LCLM"
    version uint32 (currently 1)
    meta    uint32 length + UTF-8 JSON (model config, step, kind, ...)
    count   uint32 number of tensors
    per tensor: uint16 name length + name bytes,
                uint8 dtype code, uint8 ndim, ndim * uint64 dims
    blobs   raw little-endian tensor data, manifest order
    crc32   uint32 over everything above

LoRA adapter sets use the same framing with meta["kind"] == "lora" and
factor keys like "layers.0.wq.a".
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"LCLM"
VERSION = 1

_DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i4", 4: "<u4"}
_CODE_FOR = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write a name->array mapping plus JSON metadata to one file."""
    path = Path(path)
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(params))]
    names = sorted(params)
    for name in names:
        arr = np.ascontiguousarray(params[name])
        dt = arr.dtype.newbyteorder("<")
        if np.dtype(dt) not in _CODE_FOR:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _CODE_FOR[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for name in names:
        arr = np.ascontiguousarray(params[name])
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", crc))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ValueError("checkpoint truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint; returns (params, meta). Verifies the checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise ValueError("checkpoint truncated")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError("checkpoint checksum mismatch")

    r = _Reader(payload)
    if r.take(4) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")

    manifest = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        if code not in _DTYPE_CODES:
            raise ValueError(f"unknown dtype code {code} for tensor {name}")
        manifest.append((name, np.dtype(_DTYPE_CODES[code]), dims))

    params = {}
    for name, dt, dims in manifest:
        n_items = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = r.take(n_items * dt.itemsize)
        params[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    if r.off != len(payload):
        raise ValueError("checkpoint has trailing bytes")
    return params, meta
