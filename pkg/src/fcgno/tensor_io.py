"""Reading and writing the ``FCGT`` binary tensor format.

Layout (all little-endian)::

    b"FCGT" | u32 version (=1) | u32 rank | rank x u64 dims | payload

The payload is row-major ``f64`` for real data.  Index arrays (CSR
``row_ptr`` / ``col_idx``) use a ``u64`` payload; the header does not record
the element type, so readers state which one they expect.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FCGT"
VERSION = 1

_DTYPES = {"f64": np.dtype("<f8"), "u64": np.dtype("<u8")}


def write_tensor(path: str | os.PathLike, array, dtype: str | None = None) -> None:
    arr = np.asarray(array)
    if dtype is None:
        dtype = "u64" if np.issubdtype(arr.dtype, np.integer) else "f64"
    if dtype == "u64" and arr.size and arr.min() < 0:
        raise ValueError("u64 tensors cannot hold negative values")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))


def read_tensor(path: str | os.PathLike, dtype: str = "f64") -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not an FCGT file")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported FCGT version {version}")
    offset = 12 + 8 * rank
    if len(data) < offset:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", data, 12)
    dt = _DTYPES[dtype]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) - offset != count * dt.itemsize:
        raise FormatError(
            f"{path}: payload holds {len(data) - offset} bytes, expected {count * dt.itemsize}"
        )
    arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(dims)
    if dtype == "u64":
        return arr.astype(np.int64)
    return arr.astype(np.float64)
