"""Bit-exact laboratory for INT4 weight / FP8 activation quantization.

Submodules: ``numerics`` (FP8/BF16/FP16 emulation), ``quantizer`` (INT4 with
FP8 scales), ``smoothing`` (CAS, PTS), ``rope_calib`` (RoPE, RPN, CRS),
``gemm_sim``, ``attention_sim``, ``model_block``, ``tensorio`` and ``cli``.
"""
from .attention_sim import PrecisionPolicy, TileSchedule, reference_attention, tiled_attention_forward
from .estimators import (
    ChannelAbsmeanScaler,
    KeySmoother,
    PerTensorScaler,
    QuantizedLinear,
    QuantizedTransformerBlock,
)
from .gemm_sim import dequant_op_count, int4fp8_gemm
from .model_block import BlockConfig, BlockWeights, calibrate_block, forward_fp32, forward_quantized
from .quantizer import QuantizedWeight, quantize_activations, quantize_weight
from .smoothing import compute_cas, compute_pts_exponent, underflow_group_fraction

__version__ = "0.1.0"

__all__ = [
    "BlockConfig",
    "BlockWeights",
    "ChannelAbsmeanScaler",
    "KeySmoother",
    "PerTensorScaler",
    "PrecisionPolicy",
    "QuantizedLinear",
    "QuantizedTransformerBlock",
    "QuantizedWeight",
    "TileSchedule",
    "calibrate_block",
    "compute_cas",
    "compute_pts_exponent",
    "dequant_op_count",
    "forward_fp32",
    "forward_quantized",
    "int4fp8_gemm",
    "quantize_activations",
    "quantize_weight",
    "reference_attention",
    "tiled_attention_forward",
    "underflow_group_fraction",
]
