"""ATF ("attack-transfer format") tensor files.

Layout: magic ``ATF1``, then little-endian u32 fields ``type_code``, ``ndim``
and one per dimension, then the row-major little-endian payload.
Type codes: 0 = f32, 1 = f64, 2 = u32.
"""
import os
import struct
from logging import getLogger
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .const import (
    ATF_DTYPES,
    ATF_MAGIC,
    ATF_MAX_ELEMENTS,
    ATF_MAX_NDIM,
    ATF_TYPE_F32,
    ATF_TYPE_F64,
    ATF_TYPE_U32,
)
from .exceptions import (
    AtfDimensionError,
    AtfFormatError,
    AtfMagicError,
    AtfTruncatedError,
    NonFiniteTensorError,
)

_LOGGER = getLogger(__name__)
_U32 = struct.Struct("<I")


def _type_code(array: np.ndarray) -> int:
    if array.dtype == np.float32:
        return ATF_TYPE_F32
    if array.dtype == np.float64:
        return ATF_TYPE_F64
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        if array.size and (array.min() < 0 or array.max() > 0xFFFFFFFF):
            raise AtfFormatError("integer payload does not fit in u32")
        return ATF_TYPE_U32
    raise AtfFormatError(f"unsupported element type {array.dtype}")


def encode_tensor(payload: npt.ArrayLike) -> bytes:
    array = np.asarray(payload)
    if array.ndim > ATF_MAX_NDIM:
        raise AtfDimensionError(f"{array.ndim} dimensions exceed the limit of {ATF_MAX_NDIM}")
    code = _type_code(array)
    if code != ATF_TYPE_U32 and not np.all(np.isfinite(array)):
        raise NonFiniteTensorError("refusing to write non-finite values")
    header = [ATF_MAGIC, _U32.pack(code), _U32.pack(array.ndim)]
    header.extend(_U32.pack(dim) for dim in array.shape)
    body = np.ascontiguousarray(array, dtype=ATF_DTYPES[code]).tobytes(order="C")
    return b"".join(header) + body


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < len(ATF_MAGIC):
        raise AtfTruncatedError("file shorter than the magic bytes")
    if blob[: len(ATF_MAGIC)] != ATF_MAGIC:
        raise AtfMagicError(f"bad magic {blob[:len(ATF_MAGIC)]!r}")
    offset = len(ATF_MAGIC)

    def read_u32() -> int:
        nonlocal offset
        if offset + _U32.size > len(blob):
            raise AtfTruncatedError("header is truncated")
        (value,) = _U32.unpack_from(blob, offset)
        offset += _U32.size
        return value

    code = read_u32()
    if code not in ATF_DTYPES:
        raise AtfFormatError(f"unknown element type code {code}")
    ndim = read_u32()
    if ndim > ATF_MAX_NDIM:
        raise AtfDimensionError(f"{ndim} dimensions exceed the limit of {ATF_MAX_NDIM}")
    shape = tuple(read_u32() for _ in range(ndim))
    count = 1
    for dim in shape:
        count *= dim
    if count > ATF_MAX_ELEMENTS:
        raise AtfDimensionError(f"{count} elements exceed the limit of {ATF_MAX_ELEMENTS}")
    dtype = np.dtype(ATF_DTYPES[code])
    expected = count * dtype.itemsize
    remaining = len(blob) - offset
    if remaining < expected:
        raise AtfTruncatedError(f"payload has {remaining} bytes, expected {expected}")
    if remaining > expected:
        raise AtfFormatError(f"{remaining - expected} trailing bytes after payload")
    native = dtype.newbyteorder("=")
    if count == 0:
        return np.zeros(shape, dtype=native)
    array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
    return array.astype(native, copy=True)


def save_tensor(path: str | Path, payload: npt.ArrayLike) -> None:
    """Write `payload` atomically; a failed write leaves no file behind."""
    path = Path(path)
    blob = encode_tensor(payload)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    _LOGGER.debug("wrote %s (%d bytes)", path, len(blob))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
