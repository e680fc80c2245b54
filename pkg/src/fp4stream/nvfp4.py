"""NVFP4 block-scaled quantization.

Each tensor is viewed as ``(outer, inner)`` and blocked along ``inner`` in
groups of 16. An element decodes as ``fp4(code) * e4m3(block_scale) *
global_scale`` where the global scale is ``amax / (448 * 6)`` stored as a
float32. ``mode="scale_search"`` tries mapping each block maximum to 6 and
to 4 and keeps whichever reconstructs with lower squared error; equal errors
keep the 6-target scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.linalg import hadamard

from . import _kernels
from .errors import NonFiniteError, ShapeError
from .fp_codec import (
    E2M1_MAGNITUDES,
    E2M1_MAX,
    E2M1_MIDPOINTS,
    E2M1_VALUES,
    E4M3_MAGNITUDES,
    E4M3_MAX,
    E4M3_MIDPOINTS,
    decode_e4m3_array,
    pack_nibbles,
    unpack_nibbles,
)

BLOCK_SIZE = 16
Mode = Literal["standard", "scale_search"]
_MODES = ("standard", "scale_search")


@dataclass(eq=False)
class PackedFp4Tensor:
    """Quantized tensor: packed E2M1 codes, E4M3 block scales, float32 global.

    ``codes`` holds ``ceil(n / 2)`` bytes of the row-major element codes.
    ``block_scales`` has shape ``(outer, ceil(inner / 16))``.
    ``block_decisions`` is diagnostic only (True where the 4-target scale won);
    it is not needed to dequantize and is not serialized.
    """

    dims: tuple[int, ...]
    codes: np.ndarray
    block_scales: np.ndarray
    global_scale: np.float32
    block_decisions: np.ndarray | None = field(default=None)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    @property
    def inner(self) -> int:
        return self.dims[-1] if self.dims else 1

    @property
    def outer(self) -> int:
        return self.size // self.inner if self.inner else 0

    @property
    def n_blocks(self) -> int:
        return int(self.block_scales.size)

    def code_array(self) -> np.ndarray:
        """Unpacked codes shaped ``(outer, inner)``."""
        return unpack_nibbles(self.codes, self.size).reshape(self.outer, self.inner)

    def storage_bytes(self, include_global: bool = True) -> int:
        return int(self.codes.size + self.block_scales.size + (4 if include_global else 0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedFp4Tensor):
            return NotImplemented
        return (
            tuple(self.dims) == tuple(other.dims)
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.block_scales, other.block_scales)
            and np.float32(self.global_scale).tobytes() == np.float32(other.global_scale).tobytes()
        )


@dataclass(frozen=True)
class QuantReport:
    mse: float
    max_abs_err: float
    fraction_blocks_scale4: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "max_abs_err": self.max_abs_err, "fraction_blocks_scale4": self.fraction_blocks_scale4}


def global_scale_for(x: np.ndarray) -> np.float32:
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0:
        return np.float32(1.0)
    g = np.float32(amax / (E4M3_MAX * E2M1_MAX))
    # guard against float32 underflow for denormal-range tensors
    return max(g, np.float32(np.finfo(np.float32).smallest_subnormal))


def _as_blocks(x2d: np.ndarray) -> np.ndarray:
    outer, inner = x2d.shape
    nblk = -(-inner // BLOCK_SIZE)
    pad = nblk * BLOCK_SIZE - inner
    if pad:
        x2d = np.concatenate([x2d, np.zeros((outer, pad))], axis=1)
    return np.ascontiguousarray(x2d.reshape(outer, nblk, BLOCK_SIZE))


def _check_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {_MODES}")
    return mode


def quantize_nvfp4(x, mode: Mode = "standard", global_scale: float | None = None) -> PackedFp4Tensor:
    """Quantize ``x`` along its innermost axis.

    ``global_scale`` overrides the amax-derived tensor scale; it is rounded
    to float32 like the computed one.
    """
    mode = _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite element at index {first}")
    dims = tuple(int(d) for d in x.shape)
    inner = dims[-1] if dims else 1
    x2d = x.reshape(-1, inner) if inner else x.reshape(-1, 0)
    g = global_scale_for(x) if global_scale is None else np.float32(global_scale)
    if g <= 0:
        raise ValueError("global scale must be positive")

    xb = _as_blocks(x2d)
    codes, scales, use4 = _kernels.quantize_blocks(
        xb, float(g), mode == "scale_search", E2M1_MAGNITUDES, E2M1_MIDPOINTS, E4M3_MAGNITUDES, E4M3_MIDPOINTS
    )
    flat_codes = codes.reshape(x2d.shape[0], -1)[:, :inner]
    return PackedFp4Tensor(
        dims=dims,
        codes=np.frombuffer(pack_nibbles(flat_codes), dtype=np.uint8).copy(),
        block_scales=np.asarray(scales, dtype=np.uint8),
        global_scale=np.float32(g),
        block_decisions=np.asarray(use4, dtype=bool) if mode == "scale_search" else None,
    )


def block_scale_values(q: PackedFp4Tensor) -> np.ndarray:
    return decode_e4m3_array(q.block_scales)


def dequantize_nvfp4(q: PackedFp4Tensor) -> np.ndarray:
    """float64 reconstruction; the three-factor product is exact in float64."""
    vals = E2M1_VALUES[q.code_array().astype(np.int64)]
    scales = np.repeat(block_scale_values(q), BLOCK_SIZE, axis=1)[:, : q.inner]
    # a zero block scale yields zeros whatever the codes say
    return (vals * scales * np.float64(q.global_scale)).reshape(q.dims)


def select_block_scale(block, global_scale: float = 1.0) -> tuple[int, bool]:
    """Four-over-six choice for one block: ``(e4m3 scale code, used_4_target)``."""
    b = np.asarray(block, dtype=np.float64).ravel()
    if b.size > BLOCK_SIZE:
        raise ShapeError(f"block holds at most {BLOCK_SIZE} values, got {b.size}")
    q = quantize_nvfp4(b, "scale_search", global_scale=global_scale)
    return int(q.block_scales[0, 0]), bool(q.block_decisions[0, 0])


# --------------------------------------------------------------------------
# random Hadamard transform
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RhtContext:
    seed: int
    block_size: int = BLOCK_SIZE

    @property
    def sign_vector(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.integers(0, 2, size=self.block_size) * 2.0 - 1.0

    @property
    def matrix(self) -> np.ndarray:
        """``H_16 @ diag(sign) / 4``; orthonormal."""
        h = hadamard(self.block_size).astype(np.float64)
        return h * self.sign_vector[None, :] / np.sqrt(self.block_size)


def _rht_apply(x, ctx: RhtContext, inverse: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] % ctx.block_size:
        raise ShapeError("block misalignment: innermost axis must be divisible by 16")
    t = ctx.matrix
    blocks = x.reshape(-1, ctx.block_size)
    # row-vector form: forward y = x T^T, inverse x = y T
    out = blocks @ (t if inverse else t.T)
    return out.reshape(x.shape)


def rht_forward(x, ctx: RhtContext) -> np.ndarray:
    return _rht_apply(x, ctx, inverse=False)


def rht_inverse(y, ctx: RhtContext) -> np.ndarray:
    return _rht_apply(y, ctx, inverse=True)


def quant_error_report(x, mode: Mode = "standard", use_rht: bool = False, seed: int | None = None) -> QuantReport:
    x = np.asarray(x, dtype=np.float64)
    if use_rht:
        if seed is None:
            raise ValueError("the RHT path needs a seed")
        ctx = RhtContext(seed)
        q = quantize_nvfp4(rht_forward(x, ctx), mode)
        recon = rht_inverse(dequantize_nvfp4(q), ctx)
    else:
        q = quantize_nvfp4(x, mode)
        recon = dequantize_nvfp4(q)
    err = recon - x
    frac = float(q.block_decisions.mean()) if q.block_decisions is not None and q.block_decisions.size else 0.0
    return QuantReport(
        mse=float(np.mean(err**2)) if err.size else 0.0,
        max_abs_err=float(np.max(np.abs(err))) if err.size else 0.0,
        fraction_blocks_scale4=frac,
    )
