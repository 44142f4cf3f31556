"""Binary tensor container.

Layout (all integers little-endian)::

    b"PVT1"
    u32  tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   rank, then rank x u32 extents
        raw float32 values, row-major

An optional single JSON header line (terminated by ``\\n``) may precede the magic;
model checkpoints use it to carry their configuration.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping, Optional, Union

import numpy as np

MAGIC = b"PVT1"

PathLike = Union[str, Path]


class CheckpointFormatError(ValueError):
    pass


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray], header: Optional[dict] = None) -> None:
    if header is not None:
        line = json.dumps(header, sort_keys=True, separators=(",", ":"))
        if "\n" in line:
            raise ValueError("header must serialise to a single line")
        fh.write(line.encode("utf-8") + b"\n")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} too large for {name}")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(fh: BinaryIO) -> tuple[Optional[dict], dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; ``header`` is None when absent."""
    head = fh.read(4)
    header = None
    if head != MAGIC:
        line = head + fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"bad checkpoint header: {exc}") from None
        if fh.read(4) != MAGIC:
            raise CheckpointFormatError("missing PVT1 magic")
    count = _unpack(fh, "<I")[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = _unpack(fh, "<H")
        name = _exact(fh, nlen).decode("utf-8")
        (rank,) = _unpack(fh, "<B")
        shape = _unpack(fh, f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_exact(fh, 4 * n), dtype="<f4").astype(np.float32)
        out[name] = data.reshape(shape)
    return header, out


def save(path: PathLike, tensors: Mapping[str, np.ndarray], header: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    write_tensors(buf, tensors, header)
    Path(path).write_bytes(buf.getvalue())


def load(path: PathLike) -> tuple[Optional[dict], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return read_tensors(fh)


def _exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return raw


def _unpack(fh: BinaryIO, fmt: str) -> tuple:
    return struct.unpack(fmt, _exact(fh, struct.calcsize(fmt)))
