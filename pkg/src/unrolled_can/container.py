"""Binary container shared by checkpoints, expert gates and corpus caches.

Layout (all integers little-endian)::

    b"CANROLL1"                     8-byte magic
    u32  format_version
    u64  entry count
    per entry:  u32 name length, UTF-8 name, u32 rank, rank x u64 dims
    per entry (manifest order):  raw float32 payload
    u64  JSON length, UTF-8 JSON blob (config snapshot and metadata)

Arrays are stored as float32 whatever their in-memory dtype; float32 inputs
therefore round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptContainer

MAGIC = b"CANROLL1"
FORMAT_VERSION = 1


def dumps(entries: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    arrays = {name: np.ascontiguousarray(np.asarray(a), dtype="<f4") for name, a in entries.items()}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(arrays)))
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    for a in arrays.values():
        buf.write(a.tobytes())
    blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptContainer("container truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptContainer("bad magic; not a CANROLL1 container")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CorruptContainer(f"unsupported container version {version}")
    (count,) = r.unpack("<Q")
    manifest = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        manifest.append((name, tuple(int(d) for d in dims)))
    entries = {}
    for name, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        entries[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
    (blob_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainer(f"unreadable metadata blob: {exc}") from exc
    return entries, meta


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    write_atomic(path, dumps(entries, meta))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
