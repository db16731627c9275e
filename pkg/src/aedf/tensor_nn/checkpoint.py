"""Binary tensor container shared by model checkpoints and the feature cache.

Layout (little-endian)::

    b"AEDF" | u16 version | record*
    record = u16 name_len | name (utf-8) | u8 rank | u32 dim * rank | f32 payload

Records run to end of file.  Optimiser state is never written.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AEDF"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"record {name!r} too large for the format")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0")
    if len(blob) < 6:
        raise CheckpointFormatError("truncated header at offset 4")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    pos = 6
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointFormatError(f"truncated name at offset {pos}")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointFormatError(f"truncated payload for {name!r} at offset {pos}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            if name in out:
                raise CheckpointFormatError(f"duplicate record {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated record at offset {pos}") from exc
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically so concurrent readers never see a half-written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
