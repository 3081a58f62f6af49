"""Binary container shared by checkpoints and cache snapshots.

Layout (little-endian)::

    b"RMX1" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_arrays
    then per array: u16 name_len | name | u8 dtype (0 = f32) | u8 ndim | u32 * ndim shape | payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RMX1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class ContainerError(ValueError):
    pass


def write_container(path, meta: dict, arrays: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<BB", 0, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path, expect_kind: str | None = None):
    """Return ``(meta, arrays)``; arrays come back as float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {buf[:4]!r}")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: format version {version}, expected {VERSION}")
    off = 12
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise ContainerError(f"{path}: holds {meta.get('kind')!r}, expected {expect_kind!r}")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode("utf-8")
        off += nl
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * dt.itemsize
        arrays[name] = arr.astype(np.float64)
    return meta, arrays
