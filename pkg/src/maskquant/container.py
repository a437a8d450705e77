"""Binary tensor container ("QDT1").

Layout, all integers little-endian, no alignment padding anywhere:

    magic    4 bytes   b"QDT1"
    dtype    u8        0 = float32, 1 = float64, 2 = uint32 (token ids)
    ndim     u32
    dims     ndim x u64
    payload  product(dims) x itemsize bytes, raw little-endian values

Round trips are bit-exact. Zero-size dims are legal here; algorithm entry
points reject them separately.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QDT1"
_MAX_NDIM = 8

_DTYPE_FOR_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_CODE_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("u", 4): 2}


class ContainerError(Exception):
    """Malformed tensor container or unwritable tensor."""


class BadMagicError(ContainerError):
    """File does not start with the QDT1 magic."""


class BadDtypeError(ContainerError):
    """Unknown dtype code in the header."""


class PayloadSizeError(ContainerError):
    """Payload length disagrees with the header (truncated or trailing bytes)."""


class NonFiniteError(ContainerError):
    """Float tensor contains NaN or infinity."""


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write `array` to `path`; accepts float32/float64/uint32 data."""
    arr = np.ascontiguousarray(array)
    code = _CODE_FOR_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > _MAX_NDIM:
        raise ContainerError(f"ndim must be in [1, {_MAX_NDIM}], got {arr.ndim}")
    if arr.dtype.kind == "f" and arr.size and not np.isfinite(arr).all():
        raise NonFiniteError("refusing to write non-finite values")
    header = MAGIC + struct.pack("<BI", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(_DTYPE_FOR_CODE[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Inverse of :func:`write_tensor`; validates header, size, and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a QDT1 file")
    if len(raw) < 9:
        raise PayloadSizeError(f"{path}: truncated header")
    code, ndim = struct.unpack_from("<BI", raw, 4)
    if code not in _DTYPE_FOR_CODE:
        raise BadDtypeError(f"{path}: unknown dtype code {code}")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise PayloadSizeError(f"{path}: implausible ndim {ndim}")
    dims_end = 9 + 8 * ndim
    if len(raw) < dims_end:
        raise PayloadSizeError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 9)
    dtype = _DTYPE_FOR_CODE[code]
    expected = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    if len(raw) - dims_end != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(raw) - dims_end} bytes, header implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(dims).copy()
    if dtype.kind == "f" and arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"{path}: non-finite values in payload")
    return arr
