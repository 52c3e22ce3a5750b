"""TANCKPT1 parameter files.

Layout (all integers and floats little-endian)::

    b"TANCKPT1"
    repeated until end of file:
        u32 name length, name bytes (utf-8)
        u64 rows, u64 cols
        rows * cols float64, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .exceptions import InputError

if TYPE_CHECKING:
    from collections.abc import Mapping

    import numpy.typing as npt

MAGIC = b"TANCKPT1"
_F64 = np.dtype("<f8")


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named 2-D arrays in insertion order."""
    chunks = [MAGIC]
    for name, array in tensors.items():
        values = np.atleast_2d(np.asarray(array, dtype=np.float64))
        if values.ndim != 2:
            raise InputError(f"checkpoint tensor {name!r} is not 2-D")
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<QQ", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype=_F64).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, npt.NDArray[np.float64]]:
    """Read a file written by `save_checkpoint`."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise InputError(f"cannot read checkpoint: {e.strerror}", path=path) from e
    if not data.startswith(MAGIC):
        raise InputError("not a TANCKPT1 checkpoint", path=path)
    offset = len(MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise InputError("checkpoint is truncated", path=path)
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    out: dict[str, npt.NDArray[np.float64]] = {}
    while offset < len(data):
        (length,) = struct.unpack("<I", take(4))
        start = offset
        try:
            name = take(length).decode()
        except UnicodeDecodeError:
            raise InputError(
                f"tensor name at byte {start} is not valid utf-8", path=path
            ) from None
        rows, cols = struct.unpack("<QQ", take(16))
        values = np.frombuffer(take(8 * rows * cols), dtype=_F64)
        if name in out:
            raise InputError(f"duplicate tensor {name!r}", path=path)
        out[name] = values.reshape(rows, cols).astype(np.float64)
    return out
