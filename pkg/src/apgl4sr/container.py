"""Versioned little-endian array container shared by datasets, graphs and checkpoints.

Layout::

    b"APGL" | version: u32 | entries...

    entry = name_len: u16 | name: utf-8 | dtype: u8 | rank: u8 | dims: u64 * rank | data

Entries are written in insertion order so the same mapping always produces the
same bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"APGL"
FORMAT_VERSION = 1

_TAG_TO_DTYPE = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<u4"),
    3: np.dtype("<u8"),
}
_KIND_TO_TAG = {("f", 8): 0, ("f", 4): 1, ("u", 4): 2, ("u", 8): 3}


class ContainerError(ValueError):
    pass


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_TAG:
        raise ContainerError(f"unsupported dtype {arr.dtype}; use f64, f32, u32 or u64")
    return _KIND_TO_TAG[key]


def encode_text(text: str) -> np.ndarray:
    """Pack a string as a u32 array of its UTF-8 bytes (the format has no byte dtype)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<u4")


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def encode_json(obj) -> np.ndarray:
    return encode_text(json.dumps(obj, sort_keys=True))


def decode_json(arr: np.ndarray):
    return json.loads(decode_text(arr))


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for name, value in entries.items():
        arr = np.asarray(value)
        tag = _tag_for(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} too large for entry {name}")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ContainerError("not an APGL container (bad magic)")
    if len(data) < 8:
        raise ContainerError("truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            if tag not in _TAG_TO_DTYPE:
                raise ContainerError(f"unknown dtype tag {tag} in entry {name}")
            dims = struct.unpack_from("<" + "Q" * rank, data, pos)
            pos += 8 * rank
            dtype = _TAG_TO_DTYPE[tag]
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(data):
                raise ContainerError(f"truncated data for entry {name}")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(dims)
            out[name] = arr.copy()
            pos += nbytes
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    return out


def save(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
