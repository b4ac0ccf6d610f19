"""Binary tensor container used for all persisted arrays.

Layout: magic ``AVET``, version u32 LE, dtype code u8 (0 = float32),
ndim u8, then one u64 LE per dimension, followed by the row-major
little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVET"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4")}
_CODE_FOR_DTYPE = {np.dtype("<f4"): 0}


class TensorFileError(IOError):
    """Raised when a tensor file is malformed or cannot be written."""


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` to ``path`` as float32. Parent dirs are created."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    code = _CODE_FOR_DTYPE[arr.dtype]
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise TensorFileError(f"failed to write tensor file {path}: {exc}") from exc


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TensorFileError(f"failed to read tensor file {path}: {exc}") from exc
    if len(data) < 10 or data[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor file (bad magic)")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    code, ndim = struct.unpack_from("<BB", data, 8)
    if code not in _DTYPE_CODES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    offset = 10
    shape = []
    for _ in range(ndim):
        shape.append(struct.unpack_from("<Q", data, offset)[0])
        offset += 8
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise TensorFileError(
            f"{path}: payload size mismatch (expected {expected}, got {len(data)})"
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy()
