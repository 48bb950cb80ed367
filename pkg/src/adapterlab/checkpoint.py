"""NTAR: a named-tensor archive.

Layout (all integers little-endian)::

    magic        4 bytes   b"NTAR"
    version      u16
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON
    n_entries    u32
    entry * n_entries:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32)
        rank     u8
        dims     u64 * rank
        values   float32 * prod(dims)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NTAR"
VERSION = 1
DTYPE_F32 = 0
HEADER_SIZE = 4 + 2 + 4 + 4


class CheckpointFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


def entry_overhead(name: str, rank: int) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 1 + 8 * rank


def encode_checkpoint(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise TypeError(f"{name}: only float32 tensors are stored, got {a.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, meta_len = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    meta_at = pos
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"metadata is not valid JSON: {e}", meta_at) from None
    (count,) = struct.unpack("<I", take(4, "entry count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_at = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != DTYPE_F32:
            raise CheckpointFormatError(f"unknown dtype code {dtype}", entry_at)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * numel, f"values of {name!r}")
        if name in params:
            raise CheckpointFormatError(f"duplicate entry {name!r}", entry_at)
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last entry", pos)
    return params, meta


def save_checkpoint(params: Mapping[str, np.ndarray], meta: dict | None, path: str | os.PathLike) -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    data = encode_checkpoint(params, meta)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, p)
    return p


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def read_metadata(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != MAGIC:
            raise CheckpointFormatError("bad magic", 0)
        version, meta_len = struct.unpack("<HI", head[4:])
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}", 4)
        raw = fh.read(meta_len)
        if len(raw) < meta_len:
            raise CheckpointFormatError("truncated while reading metadata", 10 + len(raw))
    return json.loads(raw.decode("utf-8"))
