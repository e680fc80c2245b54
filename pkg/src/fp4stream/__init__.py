"""Desk-scale reference for NVFP4 quantization, quantized KV caching,
Balanced sequence-parallel layout math and streaming-decode scheduling."""

from ._backend import backend_name
from .fp_codec import (
    decode_e2m1,
    decode_e4m3,
    encode_e2m1,
    encode_e4m3,
    pack_nibbles,
    read_tensor,
    unpack_nibbles,
    write_tensor,
)
from .nvfp4 import (
    PackedFp4Tensor,
    QuantReport,
    RhtContext,
    dequantize_nvfp4,
    quant_error_report,
    quantize_nvfp4,
    rht_forward,
    rht_inverse,
    select_block_scale,
)
from .qcompute import QLinear, qlinear_forward, qmatmul

__version__ = "0.1.0"

__all__ = [
    "PackedFp4Tensor",
    "QLinear",
    "QuantReport",
    "RhtContext",
    "backend_name",
    "decode_e2m1",
    "decode_e4m3",
    "dequantize_nvfp4",
    "encode_e2m1",
    "encode_e4m3",
    "pack_nibbles",
    "qlinear_forward",
    "qmatmul",
    "quant_error_report",
    "quantize_nvfp4",
    "read_tensor",
    "rht_forward",
    "rht_inverse",
    "select_block_scale",
    "unpack_nibbles",
    "write_tensor",
]
