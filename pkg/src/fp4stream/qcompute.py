"""W4A4 reference compute: block-scaled FP4 GEMM and a LoRA-wrapped linear."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ShapeError
from .fp_codec import E2M1_VALUES
from .nvfp4 import BLOCK_SIZE, PackedFp4Tensor, block_scale_values, dequantize_nvfp4, quantize_nvfp4


def _block_values(q: PackedFp4Tensor) -> np.ndarray:
    """Decoded FP4 values as ``(outer, n_blocks, 16)``, zero padded."""
    vals = E2M1_VALUES[q.code_array().astype(np.int64)]
    nblk = q.block_scales.shape[1]
    pad = nblk * BLOCK_SIZE - q.inner
    if pad:
        vals = np.concatenate([vals, np.zeros((q.outer, pad))], axis=1)
    return np.ascontiguousarray(vals.reshape(q.outer, nblk, BLOCK_SIZE))


def qmatmul(qa: PackedFp4Tensor, qb: PackedFp4Tensor) -> np.ndarray:
    """``dequant(qa) @ dequant(qb).T`` computed block by block.

    Both operands are 2-D and blocked along their last axis, which is the
    contraction axis, so ``qb`` holds the transposed right-hand matrix
    (``N x K``). Partial products accumulate in float64 in block order.
    """
    if len(qa.dims) != 2 or len(qb.dims) != 2:
        raise ShapeError("qmatmul expects 2-D operands")
    if qa.dims[1] != qb.dims[1]:
        raise ShapeError(f"contraction mismatch: {qa.dims} vs {qb.dims}")
    out = _kernels.block_gemm(
        _block_values(qa),
        np.ascontiguousarray(block_scale_values(qa)),
        _block_values(qb),
        np.ascontiguousarray(block_scale_values(qb)),
    )
    return out * (np.float64(qa.global_scale) * np.float64(qb.global_scale))


@dataclass
class QLinear:
    """Frozen quantized weight (``out x in``) plus a full-precision LoRA branch."""

    qweight: PackedFp4Tensor
    lora_a: np.ndarray | None = None
    lora_b: np.ndarray | None = None
    rank: int = 0
    lora_alpha: float = 1.0
    act_mode: str = "standard"

    @classmethod
    def from_weight(cls, w, rank=0, lora_a=None, lora_b=None, lora_alpha=None, act_mode="standard"):
        return cls(
            qweight=quantize_nvfp4(w, "scale_search"),
            lora_a=lora_a,
            lora_b=lora_b,
            rank=rank,
            lora_alpha=float(rank if lora_alpha is None else lora_alpha),
            act_mode=act_mode,
        )

    @property
    def in_features(self) -> int:
        return self.qweight.dims[1]

    @property
    def out_features(self) -> int:
        return self.qweight.dims[0]

    def _check_lora(self) -> None:
        if self.rank == 0:
            return
        if self.lora_a is None or self.lora_b is None:
            raise ShapeError("rank > 0 needs both LoRA matrices")
        if self.lora_a.shape != (self.rank, self.in_features) or self.lora_b.shape != (self.out_features, self.rank):
            raise ShapeError(
                f"LoRA shapes {self.lora_a.shape}, {self.lora_b.shape} do not fit "
                f"rank {self.rank} and weight {self.qweight.dims}"
            )

    def delta_weight(self) -> np.ndarray:
        self._check_lora()
        if self.rank == 0:
            return np.zeros((self.out_features, self.in_features))
        return (self.lora_alpha / self.rank) * (self.lora_b @ self.lora_a)

    def effective_weight(self) -> np.ndarray:
        return dequantize_nvfp4(self.qweight) + self.delta_weight()


def qlinear_forward(layer: QLinear, x) -> np.ndarray:
    """``y = x W^T`` for row-major activations ``x`` of shape ``(batch, in)``.

    Activations are quantized on the fly; the LoRA branch sees the
    unquantized ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"activation shape {x.shape} incompatible with in_features={layer.in_features}")
    layer._check_lora()
    y = qmatmul(quantize_nvfp4(x, layer.act_mode), layer.qweight)
    if layer.rank > 0:
        y = y + (layer.lora_alpha / layer.rank) * ((x @ layer.lora_a.T) @ layer.lora_b.T)
    return y


def fit_residual_lora(w, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``rank`` truncated SVD of ``w - dequant(Q_search(w))``.

    Returns ``(A, B)`` with ``B @ A`` the best rank-``rank`` approximation of
    the residual, for use with ``lora_alpha == rank``.
    """
    w = np.asarray(w, dtype=np.float64)
    resid = w - dequantize_nvfp4(quantize_nvfp4(w, "scale_search"))
    u, s, vt = np.linalg.svd(resid, full_matrices=False)
    return vt[:rank], u[:, :rank] * s[:rank]
