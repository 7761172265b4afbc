"""Raw tensor files with a fixed little-endian header.

Layout (all integers little-endian uint32):

    bytes 0..3    magic ``b"GWTR"``
    bytes 4..7    format version (currently 1)
    bytes 8..11   dtype code: 0 = float32, 1 = int32, 2 = float64, 3 = uint8
    bytes 12..15  ndim
    16 onwards    ndim uint32 dims, then the payload, C order, little-endian

The format is deliberately dumb so that a reader can be written from this
docstring alone.  Payloads are always written little-endian regardless of
host byte order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GWTR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_FOR_KIND = {"f4": 0, "i4": 1, "f8": 2, "u1": 3}


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` to ``path``; dtype must be one of f4/i4/f8/u1."""
    arr = np.ascontiguousarray(array)
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    key = {"f4": "f4", "f8": "f8", "i4": "i4", "u1": "u1"}.get(key)
    if key is None:
        raise ValueError(f"unsupported tensor dtype {array.dtype}")
    code = _CODE_FOR_KIND[key]
    header = MAGIC + struct.pack("<III", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`.

    Raises :class:`FormatError` on a bad magic, version, dtype code, or a
    payload whose size disagrees with the header.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a GWTR tensor file")
    version, code, ndim = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported tensor format version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if len(raw) < 16 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[16 : 16 + 4 * ndim])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[16 + 4 * ndim :]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
