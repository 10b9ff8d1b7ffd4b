"""Little-endian binary tensor container.

Layout of a single tensor record::

    offset  size        field
    0       4           magic  b"VBT1"
    4       1           dtype code (see ``DTYPE_CODES``)
    5       1           ndim
    6       8 * ndim    shape, uint64 little-endian
    ...     prod(shape) * itemsize   body, row-major (C order), little-endian

Several records may be concatenated in one file; :func:`read_tensors` reads
them all back in order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"VBT1"

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<u1"),
    5: np.dtype("<i4"),
    6: np.dtype("?"),
}
_CODE_FOR = {dt.str if dt.kind != "b" else "?": code for code, dt in DTYPE_CODES.items()}


def _code(dtype: np.dtype) -> int:
    dtype = np.dtype(dtype)
    key = "?" if dtype.kind == "b" else dtype.newbyteorder("<").str
    try:
        return _CODE_FOR[key]
    except KeyError:
        raise CheckpointFormatError(f"dtype {dtype} has no container code") from None


def write_tensor(fh: BinaryIO, array) -> None:
    array = np.asarray(array)
    code = _code(array.dtype)
    body = np.asarray(array, dtype=DTYPE_CODES[code], order="C")  # keeps 0-d shapes
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, body.ndim))
    fh.write(struct.pack(f"<{body.ndim}Q", *body.shape))
    fh.write(body.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read one record; returns ``None`` at a clean end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad tensor magic {magic!r}")
    code, ndim = struct.unpack("<BB", fh.read(2))
    if code not in DTYPE_CODES:
        raise CheckpointFormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise CheckpointFormatError("truncated tensor body")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_tensors(path, arrays: Iterable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        for array in arrays:
            write_tensor(fh, array)
    tmp.replace(path)


def read_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (arr := read_tensor(fh)) is not None:
            out.append(arr)
    return out
