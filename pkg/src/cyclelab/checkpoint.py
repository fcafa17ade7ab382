"""Binary checkpoint container.

Layout: magic ``CYCD``, version byte 1, a 32-bit little-endian length-prefixed
UTF-8 JSON metadata block, then a sequence of named float32 arrays, each as
(u32 name length, name bytes, u32 rank, u32 dims..., raw little-endian float32
data). Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CYCD"
VERSION = 1


class CorruptCheckpointError(Exception):
    """Malformed checkpoint content (bad magic, version, or truncation)."""


def save(path: Path | str, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, bytes([VERSION])]
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)))
    chunks.append(meta)
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])  # tobytes() serializes in C order
        if arr.dtype != np.float32:
            raise ValueError(f"array {name!r} must be float32, got {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _take(buf: bytes, offset: int, n: int) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise CorruptCheckpointError(
            f"truncated checkpoint: wanted {n} bytes at offset {offset}, "
            f"file holds {len(buf)}")
    return buf[offset:offset + n], offset + n


def load(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    head, off = _take(buf, 0, 5)
    if head[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if head[4] != VERSION:
        raise CorruptCheckpointError(f"unsupported version {head[4]}")
    raw, off = _take(buf, off, 4)
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = _take(buf, off, meta_len)
    try:
        metadata = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable metadata block: {e}") from e

    arrays: dict[str, np.ndarray] = {}
    while off < len(buf):
        raw, off = _take(buf, off, 4)
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, name_len)
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 4)
        (rank,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, 4 * rank)
        dims = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, off = _take(buf, off, 4 * count)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return metadata, arrays
