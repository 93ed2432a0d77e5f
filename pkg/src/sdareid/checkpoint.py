"""Flat binary checkpoint format for named float64 tensors.

Layout of a ``.bin`` file (all integers unsigned 32-bit little-endian)::

    b"SDAP" | version | tensor count
    per tensor: name length | UTF-8 name | ndim | dims... | values as <f8

A sibling ``.manifest`` text file lists ``name<TAB>shape`` per tensor with
shapes written as ``4x32`` (``scalar`` for rank 0).
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"SDAP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> Path:
    """Write ``tensors`` to ``path`` (``.bin``) plus its ``.manifest``."""
    path = Path(path).with_suffix(".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    manifest = []
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")  # ascontiguousarray would promote scalars to 1-D
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
        manifest.append(f"{name}\t{_shape_text(arr.shape)}\n")
    path.write_bytes(b"".join(chunks))
    path.with_suffix(".manifest").write_text("".join(manifest), encoding="utf-8")
    return path


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path).with_suffix(".bin")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
