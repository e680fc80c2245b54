"""Bit-exact E2M1 (FP4) and E4M3 (FP8) codecs, nibble packing, NVT1 files.

Bit layouts::

    E2M1  S EE M       bias 1, exponent 0 is subnormal (0 or 0.5)
    E4M3  S EEEE MMM   bias 7, no infinities, S 1111 111 is NaN

Both encoders round to nearest with ties to the even mantissa bit and
saturate at the largest finite magnitude (6 and 448).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import (
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    CodecError,
    NonFiniteError,
    TruncatedError,
    TruncatedPayloadError,
)

E2M1_MAX = 6.0
E4M3_MAX = 448.0
E4M3_MIN_SUBNORMAL = 2.0**-9


def _e2m1_magnitude(code: int) -> float:
    exp = (code >> 1) & 0x3
    man = code & 0x1
    if exp == 0:
        return man * 0.5
    return (1.0 + man / 2.0) * 2.0 ** (exp - 1)


def _e4m3_magnitude(code: int) -> float:
    exp = (code >> 3) & 0xF
    man = code & 0x7
    if exp == 0:
        return man / 8.0 * 2.0**-6
    return (1.0 + man / 8.0) * 2.0 ** (exp - 7)


# magnitude tables, indexed by the code with the sign bit cleared
E2M1_MAGNITUDES = np.array([_e2m1_magnitude(c) for c in range(8)], dtype=np.float64)
E2M1_MIDPOINTS = (E2M1_MAGNITUDES[:-1] + E2M1_MAGNITUDES[1:]) / 2
E2M1_VALUES = np.concatenate([E2M1_MAGNITUDES, -E2M1_MAGNITUDES])
E2M1_VALUES[8] = 0.0

E4M3_MAGNITUDES = np.array([_e4m3_magnitude(c) for c in range(0x7F)], dtype=np.float64)
E4M3_MIDPOINTS = (E4M3_MAGNITUDES[:-1] + E4M3_MAGNITUDES[1:]) / 2
E4M3_NAN_CODES = frozenset({0x7F, 0xFF})


def _check_finite(x: np.ndarray) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite input at index {first}")


def encode_e2m1_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    mag = _kernels.round_to_grid(np.abs(x).reshape(-1), E2M1_MIDPOINTS).reshape(x.shape)
    neg = (x < 0) & (mag > 0)
    return (mag | (neg.astype(np.int64) << 3)).astype(np.uint8)


def decode_e2m1_array(codes) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > 0xF):
        raise CodecError("E2M1 codes must be 4-bit")
    return E2M1_VALUES[codes.astype(np.int64)]


def encode_e4m3_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    mag = _kernels.round_to_grid(np.abs(x).reshape(-1), E4M3_MIDPOINTS).reshape(x.shape)
    neg = (x < 0) & (mag > 0)
    return (mag | (neg.astype(np.int64) << 7)).astype(np.uint8)


def decode_e4m3_array(codes) -> np.ndarray:
    codes = np.asarray(codes).astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() > 0xFF):
        raise CodecError("E4M3 codes must be 8-bit")
    mag = codes & 0x7F
    if (mag == 0x7F).any():
        raise CodecError("E4M3 NaN pattern")
    out = E4M3_MAGNITUDES[mag]
    return np.where(codes & 0x80, -out, out) + 0.0


def encode_e2m1(x: float) -> int:
    return int(encode_e2m1_array(float(x)))


def decode_e2m1(code: int) -> float:
    return float(decode_e2m1_array(int(code)))


def encode_e4m3(x: float) -> int:
    return int(encode_e4m3_array(float(x)))


def decode_e4m3(code: int) -> float:
    return float(decode_e4m3_array(int(code)))


def pack_nibbles(codes: Sequence[int] | np.ndarray) -> bytes:
    """Two codes per byte, first code in the low nibble; odd tails pad with 0."""
    c = np.asarray(codes, dtype=np.uint8).ravel()
    if c.size and c.max() > 0xF:
        raise CodecError("nibble values must be < 16")
    if c.size % 2:
        c = np.append(c, np.uint8(0))
    return (c[0::2] | (c[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes | np.ndarray, count: int) -> np.ndarray:
    b = np.frombuffer(bytes(data), dtype=np.uint8)
    if count > 2 * b.size:
        raise TruncatedError(f"truncated: {count} nibbles requested, {2 * b.size} available")
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0xF
    out[1::2] = b >> 4
    return out[:count]


# --------------------------------------------------------------------------
# NVT1 tensor container
# --------------------------------------------------------------------------

MAGIC = b"NVT1"
VERSION = 1
DTYPE_FLOAT32 = 0
DTYPE_FLOAT16 = 1
DTYPE_PACKED_FP4 = 2

_NUMPY_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_FLOAT16: np.dtype("<f2")}


def packed_payload_size(dims: Sequence[int]) -> int:
    n = int(np.prod(dims, dtype=np.int64)) if len(dims) else 1
    inner = dims[-1] if len(dims) else 1
    outer = n // inner if inner else 0
    nblocks = outer * -(-inner // 16)
    return -(-n // 2) + nblocks + 4


def encode_tensor(tensor) -> bytes:
    from .nvfp4 import PackedFp4Tensor

    if isinstance(tensor, PackedFp4Tensor):
        dims = tuple(tensor.dims)
        payload = (
            tensor.codes.tobytes()
            + tensor.block_scales.astype(np.uint8).tobytes()
            + struct.pack("<f", float(tensor.global_scale))
        )
        dtype = DTYPE_PACKED_FP4
    else:
        arr = np.asarray(tensor)
        for code, dt in _NUMPY_DTYPES.items():
            if arr.dtype == dt.newbyteorder("=") or arr.dtype == dt:
                dtype = code
                break
        else:
            raise TypeError(f"cannot store dtype {arr.dtype}; use float32, float16 or PackedFp4Tensor")
        dims = arr.shape
        payload = np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[dtype]).tobytes()
    if len(dims) > 255:
        raise CodecError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, dtype, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return header + payload


def decode_tensor(data: bytes):
    from .nvfp4 import PackedFp4Tensor

    if len(data) < 7:
        raise TruncatedPayloadError("truncated payload: header incomplete")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version, dtype, ndim = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if dtype not in (DTYPE_FLOAT32, DTYPE_FLOAT16, DTYPE_PACKED_FP4):
        raise BadDtypeError(f"unknown dtype {dtype}")
    off = 7 + 8 * ndim
    if len(data) < off:
        raise TruncatedPayloadError("truncated payload: dims incomplete")
    dims = struct.unpack_from(f"<{ndim}Q", data, 7)
    payload = data[off:]
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1

    if dtype == DTYPE_PACKED_FP4:
        if len(payload) != packed_payload_size(dims):
            raise TruncatedPayloadError(
                f"truncated payload: expected {packed_payload_size(dims)} bytes, got {len(payload)}"
            )
        ncode = -(-n // 2)
        inner = dims[-1] if ndim else 1
        outer = n // inner if inner else 0
        nblk = -(-inner // 16)
        codes = np.frombuffer(payload[:ncode], dtype=np.uint8).copy()
        scales = np.frombuffer(payload[ncode : ncode + outer * nblk], dtype=np.uint8).reshape(outer, nblk).copy()
        (g,) = struct.unpack("<f", payload[-4:])
        return PackedFp4Tensor(dims=tuple(dims), codes=codes, block_scales=scales, global_scale=np.float32(g))

    dt = _NUMPY_DTYPES[dtype]
    if len(payload) != n * dt.itemsize:
        raise TruncatedPayloadError(f"truncated payload: expected {n * dt.itemsize} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())
