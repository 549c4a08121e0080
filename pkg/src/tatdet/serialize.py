"""Flat binary parameter container (``.tatw``).

Layout, all little-endian::

    b"TATW" | version:u32 | record*
    record = name_len:u32 | name:utf-8 | ndim:u32 | dims:u64*ndim | data:f32*prod(dims)
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TATW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a TATW container")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError("truncated record name")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            nbytes = 4 * count
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt container: {exc}") from exc
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(arrays))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
