"""Symmetric INT4 quantization with FP8 scales, FP8 activation quantization.

Scales are kept as raw bit codes (``uint8`` for FP8, ``uint16`` for BF16) so
that a quantized object is exactly what a kernel would load; the ``*_value``
helpers decode them.

Rounding conventions:

* the INT4 scale ``max|x| / 7`` is encoded toward zero, so a group whose max
  magnitude is below ``7 * 2**-9`` gets a zero FP8 scale and vanishes;
* element codes use round-half-even and are clamped to ``[-8, 7]``;
* the activation scale ``max|y| / 448`` is encoded to BF16 nearest-even.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .numerics import (
    BF16,
    FP8_E4M3,
    FP8_MAX,
    INT4_MAX,
    INT4_MIN,
    INT4_QMAX,
    NEAREST_EVEN,
    TOWARD_ZERO,
    decode,
    encode,
    fp8_decode,
    fp8_encode,
    bf16_decode,
    bf16_encode,
)

if TYPE_CHECKING:
    from .smoothing import SmoothingRecipe

SCALE_FORMATS = {"fp8": FP8_E4M3, "bf16": BF16}
INT4_LEVELS = np.arange(INT4_MIN, INT4_MAX + 1)


def _scale_fmt(scale_format):
    try:
        return SCALE_FORMATS[scale_format]
    except KeyError:
        raise ValueError(f"scale_format must be one of {sorted(SCALE_FORMATS)}") from None


def divide_round_half_even(x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """``round_half_even(x / sigma)`` with the tie decided exactly.

    ``sigma`` must be positive.  A float64 quotient can land on ``k + 0.5``
    without the true ratio being a tie; such cases are re-decided by comparing
    ``x`` with ``(k + 0.5) * sigma``, which is exact because ``sigma`` has at
    most 8 significant bits.
    """
    q = x / sigma
    r = np.rint(q)
    fl = np.floor(q)
    tie = (q - fl) == 0.5
    if np.any(tie):
        mid = (fl + 0.5) * sigma
        r = np.where(tie & (x > mid), fl + 1, r)
        r = np.where(tie & (x < mid), fl, r)
    return r


def _quantize_rows(rows: np.ndarray, scale_format: str = "fp8"):
    """Quantize each row of a 2-D array as one symmetric INT4 group."""
    fmt = _scale_fmt(scale_format)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("expected a 2-D array of groups")
    if rows.shape[1] == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(rows)):
        raise ValueError("group values must be finite")
    amax = np.max(np.abs(rows), axis=1)
    scale_codes = encode(amax / INT4_QMAX, fmt, TOWARD_ZERO)
    sigma = decode(scale_codes, fmt)
    nonzero = sigma > 0
    safe = np.where(nonzero, sigma, 1.0)[:, None]
    codes = divide_round_half_even(rows, safe)
    codes = np.clip(codes, INT4_MIN, INT4_MAX)
    codes = np.where(nonzero[:, None], codes, 0).astype(np.int8)
    return np.atleast_1d(scale_codes), codes


def _lut_values(scale_codes: np.ndarray, scale_format: str) -> np.ndarray:
    # one 16-entry table per scale: entry[v + 8] = round(v * sigma)
    fmt = _scale_fmt(scale_format)
    sigma = decode(np.asarray(scale_codes), fmt)
    products = np.multiply.outer(sigma, INT4_LEVELS.astype(np.float64))
    return decode(encode(products, fmt), fmt)


@dataclass
class QuantGroup:
    scale: int
    codes: np.ndarray
    scale_format: str = "fp8"

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        if self.codes.size and (self.codes.min() < INT4_MIN or self.codes.max() > INT4_MAX):
            raise ValueError("INT4 codes out of range")

    @property
    def scale_value(self) -> float:
        return float(decode(self.scale, _scale_fmt(self.scale_format)))

    def dequantize(self) -> np.ndarray:
        lut = _lut_values(np.array([self.scale]), self.scale_format)[0]
        return lut[self.codes.astype(np.int64) - INT4_MIN]


@dataclass
class QuantizedKvRow(QuantGroup):
    pass


@dataclass
class QuantizedWeight:
    """Group-wise INT4 weight: ``codes`` is ``(N_out, N_in)``, ``scales`` is
    ``(N_out, N_in // group_size)`` raw scale codes."""

    codes: np.ndarray
    scales: np.ndarray
    group_size: int = 128
    pts_exponent: int = 0
    scale_format: str = "fp8"
    recipe: Optional["SmoothingRecipe"] = field(default=None, repr=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        n_out, n_in = self.codes.shape
        if n_in % self.group_size:
            raise ValueError(f"N_in={n_in} is not divisible by group_size={self.group_size}")
        if self.scales.shape != (n_out, n_in // self.group_size):
            raise ValueError("scale grid does not match codes")
        if self.pts_exponent < 0:
            raise ValueError("pts_exponent must be non-negative")

    @property
    def shape(self):
        return self.codes.shape

    @property
    def n_groups(self) -> int:
        return self.scales.size

    def group(self, row: int, index: int) -> QuantGroup:
        g = self.group_size
        return QuantGroup(
            int(self.scales[row, index]),
            self.codes[row, index * g:(index + 1) * g].copy(),
            self.scale_format,
        )

    def scale_values(self) -> np.ndarray:
        return decode(self.scales, _scale_fmt(self.scale_format))

    def lut(self) -> np.ndarray:
        """Per-group LUTs as values, shape ``(N_out, n_groups, 16)``."""
        return _lut_values(self.scales, self.scale_format)

    def dequantize_lut(self) -> np.ndarray:
        """LUT values of every element (merged scales, ``2**n`` still applied)."""
        n_out, n_in = self.codes.shape
        g = self.group_size
        lut = self.lut().reshape(-1, 16)
        idx = self.codes.reshape(-1, g).astype(np.int64) - INT4_MIN
        vals = np.take_along_axis(lut, idx, axis=1)
        return vals.reshape(n_out, n_in)

    def dequantize(self) -> np.ndarray:
        return np.ldexp(self.dequantize_lut(), -self.pts_exponent)


@dataclass
class Fp8ActivationRow:
    scale_beta: int
    codes: np.ndarray

    @property
    def beta(self) -> float:
        return float(bf16_decode(self.scale_beta))

    def dequantize(self) -> np.ndarray:
        return self.beta * fp8_decode(self.codes)


@dataclass
class Fp8Activations:
    """A batch of FP8 activation rows: ``scales`` (BF16 codes) and ``codes``."""

    scales: np.ndarray
    codes: np.ndarray

    def __len__(self):
        return self.codes.shape[0]

    def __getitem__(self, i) -> Fp8ActivationRow:
        return Fp8ActivationRow(int(self.scales[i]), self.codes[i])

    @property
    def shape(self):
        return self.codes.shape

    def betas(self) -> np.ndarray:
        return bf16_decode(self.scales)

    def code_values(self) -> np.ndarray:
        return fp8_decode(self.codes)

    def dequantize(self) -> np.ndarray:
        return self.betas()[:, None] * self.code_values()


@dataclass
class QuantizedKv:
    """Per-token INT4 keys or values (one FP8 scale per row)."""

    scales: np.ndarray
    codes: np.ndarray

    def __getitem__(self, i) -> QuantizedKvRow:
        return QuantizedKvRow(int(self.scales[i]), self.codes[i].copy())

    def dequantize(self) -> np.ndarray:
        lut = _lut_values(self.scales, "fp8")
        idx = self.codes.astype(np.int64) - INT4_MIN
        return np.take_along_axis(lut, idx, axis=1)


def int4_symmetric_quantize(values, scale_format: str = "fp8") -> QuantGroup:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty group")
    scales, codes = _quantize_rows(values[None, :], scale_format)
    return QuantGroup(int(scales[0]), codes[0], scale_format)


def build_dequant_lut(scale: int, scale_format: str = "fp8") -> np.ndarray:
    """16 raw codes; entry ``v + 8`` encodes ``v * sigma`` (nearest-even)."""
    fmt = _scale_fmt(scale_format)
    sigma = float(decode(scale, fmt))
    return encode(INT4_LEVELS * sigma, fmt, NEAREST_EVEN)


def dequantize(q):
    """Dequantize a :class:`QuantGroup`, :class:`QuantizedWeight` or
    :class:`QuantizedKv` via its lookup table."""
    return q.dequantize()


def fp8_quantize_activation_row(row) -> Fp8ActivationRow:
    acts = quantize_activations(np.asarray(row, dtype=np.float64)[None, :])
    return acts[0]


def quantize_activations(X) -> Fp8Activations:
    """Per-row FP8 quantization with a BF16 scale mapping the row max to 448.

    All-zero rows get ``beta = 1`` and zero codes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("activations must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("activations must be finite")
    amax = np.max(np.abs(X), axis=1) if X.shape[1] else np.zeros(X.shape[0])
    beta_codes = np.atleast_1d(bf16_encode(amax / FP8_MAX))
    beta = bf16_decode(beta_codes)
    # a row max so small that beta rounds to zero is treated like an all-zero row
    zero = beta == 0
    beta_codes = np.where(zero, bf16_encode(1.0), beta_codes).astype(np.uint16)
    beta = np.where(zero, 1.0, beta)
    codes = fp8_encode(X / beta[:, None])
    codes = np.where(zero[:, None], np.uint8(0), codes).astype(np.uint8)
    return Fp8Activations(beta_codes, codes)


def quantize_weight(W, group_size: int = 128, recipe: "SmoothingRecipe | None" = None,
                    scale_format: str = "fp8") -> QuantizedWeight:
    """Group-wise INT4 quantization of an already merged and PTS-scaled weight."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("weight must be 2-D")
    n_out, n_in = W.shape
    if group_size <= 0 or n_in % group_size:
        raise ValueError(f"N_in={n_in} is not divisible by group_size={group_size}")
    scales, codes = _quantize_rows(W.reshape(-1, group_size), scale_format)
    n = recipe.pts.exponent if recipe is not None and recipe.pts is not None else 0
    return QuantizedWeight(
        codes=codes.reshape(n_out, n_in),
        scales=scales.reshape(n_out, n_in // group_size),
        group_size=group_size,
        pts_exponent=n,
        scale_format=scale_format,
        recipe=recipe,
    )


def quantize_kv_row(row) -> QuantizedKvRow:
    g = int4_symmetric_quantize(row, "fp8")
    return QuantizedKvRow(g.scale, g.codes)


def quantize_kv(X) -> QuantizedKv:
    """Per-token INT4 quantization with FP8 scales (keys and values)."""
    X = np.asarray(X, dtype=np.float64)
    scales, codes = _quantize_rows(X, "fp8")
    return QuantizedKv(scales, codes)
