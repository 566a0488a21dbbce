"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SFCK" | version u32 | count u32 |
    per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | dtype u8 | payload

Only dtype code 0 (float64) is defined.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFCK"
VERSION = 1
DTYPES = {0: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f" or arr.dtype.itemsize != 8:
            raise CheckpointError(f"{name}: only float64 tensors are supported, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", 0))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    if len(view) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            (code,) = struct.unpack_from("<B", view, pos)
            pos += 1
            if code not in DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dtype = DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(view):
                raise CheckpointError(f"{name}: truncated payload")
            out[name] = np.frombuffer(view[pos : pos + size], dtype=dtype).reshape(dims).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors))
    return path


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def with_prefix(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}


def strip_prefix(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in tensors.items() if k.startswith(p)}
