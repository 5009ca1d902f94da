"""Deterministic model of the INT4 x FP8 GEMM kernel.

Dataflow per output element ``(m, n)``:

1. weight code -> FP8 through the group's 16-entry LUT;
2. ``sum_k act[m, k] * w[n, k]`` with FP8 x FP8 products (exact in FP32)
   added into an FP32 accumulator in ascending ``k``;
3. one FP32 multiply by the activation scale ``beta[m]`` and an exact
   ``2**-n`` PTS fold;
4. FP32 epilogue (activation, gate multiply, residual), then a single encode
   to the output format.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import quantize_to
from .quantizer import Fp8Activations, QuantizedWeight

ACTIVATIONS = ("none", "silu", "relu")


@dataclass
class EpilogueSpec:
    activation: str = "none"
    elementwise_multiplier: Optional[np.ndarray] = None
    residual: Optional[np.ndarray] = None
    output_format: str = "bf16"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_format not in ("bf16", "fp32"):
            raise ValueError("output_format must be bf16 or fp32")


@dataclass
class GemmTrace:
    accumulation_format: str = "fp32"
    reduction_order: str = "ascending-k"
    multiplies: int = 0
    lut_lookups: int = 0
    scale_multiplies: int = 0


def silu(x) -> np.ndarray:
    """``x * sigmoid(x)`` evaluated in FP32."""
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        return (x / (np.float32(1) + np.exp(-x))).astype(np.float32)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))


def accumulate(A, B, dtype=np.float32) -> np.ndarray:
    """``A @ B.T`` summed strictly in ascending ``k`` in ``dtype``.

    Each product is formed in float64 and rounded once to ``dtype`` before the
    add; for FP8 operands the product is exact so no rounding happens.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"inner dimensions disagree: {A.shape} x {B.shape}^T")
    acc = np.zeros((A.shape[0], B.shape[0]), dtype=dtype)
    for k in range(A.shape[1]):
        acc += np.multiply.outer(A[:, k], B[:, k]).astype(dtype)
    return acc


def reference_gemm(X, W) -> np.ndarray:
    """``Y = X @ W.T`` in float64 with the same fixed reduction order."""
    return accumulate(X, W, np.float64)


def apply_epilogue(y: np.ndarray, epilogue: EpilogueSpec) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if epilogue.activation == "silu":
        y = silu(y)
    elif epilogue.activation == "relu":
        y = relu(y)
    for operand in (epilogue.elementwise_multiplier, epilogue.residual):
        if operand is not None and np.shape(operand) != y.shape:
            raise ValueError(f"epilogue operand shape {np.shape(operand)} != output {y.shape}")
    if epilogue.elementwise_multiplier is not None:
        y = y * np.asarray(epilogue.elementwise_multiplier, dtype=np.float32)
    if epilogue.residual is not None:
        y = y + np.asarray(epilogue.residual, dtype=np.float32)
    return quantize_to(y, epilogue.output_format).astype(np.float32)


def int4fp8_gemm(act: Fp8Activations, w: QuantizedWeight, epilogue: EpilogueSpec | None = None,
                 trace: GemmTrace | None = None) -> np.ndarray:
    """Simulated kernel output for ``act @ dequant(w).T``; returns float32.

    Pass a :class:`GemmTrace` to collect operation counters.
    """
    epilogue = epilogue or EpilogueSpec()
    m, k = act.shape
    n, k_w = w.shape
    if k != k_w:
        raise ValueError(f"activation width {k} != weight N_in {k_w}")
    acc = accumulate(act.code_values(), w.dequantize_lut(), np.float32)
    beta = act.betas().astype(np.float32)
    y = acc * beta[:, None]
    y = np.ldexp(y, np.int32(-w.pts_exponent)).astype(np.float32)
    out = apply_epilogue(y, epilogue)
    if trace is not None:
        trace.multiplies += m * n * k
        trace.lut_lookups += n * k
        trace.scale_multiplies += m * n
    return out


def dequant_op_count(batch: int, d_in: int, d_out: int) -> int:
    """Dequantization work per linear layer: ``d_out * d_in`` LUT lookups plus
    ``batch * d_out`` output-scale multiplies."""
    return (batch + d_in) * d_out
