"""Bit-exact on-disk container for images, feature stacks and label rasters.

Layout (all integers little-endian)::

    offset  size      field
    0       4         ASCII magic ``S4XR``
    4       1         version, currently 0x01
    5       1         dtype code: 0x00 float32, 0x01 uint8
    6       1         ndim
    7       1         reserved, must be 0
    8       4*ndim    uint32 dims
    ...               row-major payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"S4XR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class RasterFormatError(ValueError):
    """Base class for malformed raster files."""

    code = "format"


class BadMagicError(RasterFormatError):
    code = "bad_magic"


class TruncatedRasterError(RasterFormatError):
    code = "truncated"


class DtypeMismatchError(RasterFormatError):
    code = "dtype"


def encode_raster(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise DtypeMismatchError(f"unsupported dtype {array.dtype}; expected float32 or uint8")
    if array.ndim > 255:
        raise RasterFormatError("too many dimensions")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, array.ndim, 0)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_raster(blob: bytes, expect_dtype=None) -> np.ndarray:
    if blob[:4] != MAGIC[: len(blob)] or len(blob) < 4:
        raise BadMagicError("not an S4XR raster (bad magic)")
    if len(blob) < 8:
        raise TruncatedRasterError("raster header is truncated")
    version, code, ndim, reserved = struct.unpack_from("<BBBB", blob, 4)
    if version != VERSION:
        raise RasterFormatError(f"unsupported raster version {version}")
    if code not in _DTYPES:
        raise DtypeMismatchError(f"unknown dtype code {code:#04x}")
    if reserved != 0:
        raise RasterFormatError("reserved header byte is not zero")
    dtype = _DTYPES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dtype:
        raise DtypeMismatchError(f"raster holds {dtype.name}, expected {np.dtype(expect_dtype).name}")
    start = 8 + 4 * ndim
    if len(blob) < start:
        raise TruncatedRasterError("header shorter than declared dimensions")
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - start != expected:
        raise TruncatedRasterError(
            f"payload is {len(blob) - start} bytes, header dims {shape} need {expected}"
        )
    out = np.frombuffer(blob, dtype=dtype, offset=start).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write_raster(array: np.ndarray, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_raster(array))


def read_raster(path: str | os.PathLike, expect_dtype=None) -> np.ndarray:
    return decode_raster(Path(path).read_bytes(), expect_dtype=expect_dtype)
