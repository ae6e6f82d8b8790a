"""The "UADM" model container: a kind tag, JSON metadata and named little-endian arrays.

Layout::

    b"UADM" | u32 version | u16 len + kind | u32 len + JSON meta | u32 n_arrays
    per array: u16 len + name | u8 dtype | u8 ndim | u32 * ndim shape | data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UADM"
VERSION = 1
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


def dumps(kind: str, meta: dict, arrays: dict) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    kb = kind.encode()
    mb = json.dumps(meta, sort_keys=True).encode()
    out += [struct.pack("<H", len(kb)), kb, struct.pack("<I", len(mb)), mb, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f" and arr.dtype.itemsize == 4:
            arr = arr.astype("<f4")
        elif arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise ContainerError(f"array {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode()
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", _CODES[arr.dtype.str], arr.ndim)]
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(buf: bytes, expect_kind: str | None = None):
    """Returns ``(kind, meta, arrays)``."""
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos = 8
        (n,) = struct.unpack_from("<H", buf, pos)
        kind = buf[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (n,) = struct.unpack_from("<I", buf, pos)
        meta = json.loads(buf[pos + 4:pos + 4 + n])
        pos += 4 + n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(buf):
                raise ContainerError(f"array {name!r} truncated")
            arrays[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes in container")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"expected a {expect_kind!r} container, found {kind!r}")
    return kind, meta, arrays


def save(path, kind, meta, arrays):
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path, expect_kind=None):
    return loads(Path(path).read_bytes(), expect_kind)
