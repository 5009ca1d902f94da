"""Bit-exact software emulation of the small floating-point formats.

Every format is described by a :class:`FloatFormat` and handled by the same
two routines: :func:`round_to_grid` (value -> nearest representable value)
and the code packers (:func:`encode` / :func:`decode`).  All arithmetic is
done in float64, which holds every FP8/FP16/BF16/FP32 value exactly, and all
scaling is by powers of two, so the rounding is exact rather than
approximated.

FP8 here is always E4M3 in the "fn" convention: no infinities, a single NaN
code per sign (``S.1111.111``) and a largest finite magnitude of 448.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAREST_EVEN = "nearest-even"
TOWARD_ZERO = "toward-zero"
ROUNDING_MODES = (NEAREST_EVEN, TOWARD_ZERO)


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exp_bits: int
    man_bits: int
    bias: int
    max_finite: float
    has_inf: bool

    @property
    def width(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def min_normal(self) -> float:
        return float(2.0 ** self.emin)

    @property
    def min_subnormal(self) -> float:
        return float(2.0 ** (self.emin - self.man_bits))

    @property
    def code_dtype(self):
        return {8: np.uint8, 16: np.uint16, 32: np.uint32}[self.width]


FP8_E4M3 = FloatFormat("fp8e4m3", 4, 3, 7, 448.0, has_inf=False)
FP16 = FloatFormat("fp16", 5, 10, 15, 65504.0, has_inf=True)
BF16 = FloatFormat("bf16", 8, 7, 127, float((2 - 2.0**-7) * 2.0**127), has_inf=True)
FP32 = FloatFormat("fp32", 8, 23, 127, float((2 - 2.0**-23) * 2.0**127), has_inf=True)

FORMATS = {f.name: f for f in (FP8_E4M3, FP16, BF16, FP32)}
FORMATS["fp8"] = FP8_E4M3

FP8_MAX = FP8_E4M3.max_finite              # 1.75 * 2**8
FP8_MIN_SUBNORMAL = FP8_E4M3.min_subnormal  # 2**-9
FP8_MIN_NORMAL = FP8_E4M3.min_normal        # 2**-6
FP8_NAN_CODE = 0x7F

INT4_MIN, INT4_MAX = -8, 7
INT4_QMAX = 7  # 2**(4-1) - 1
# Any INT4 group whose max magnitude is below this gets an FP8 scale of zero.
UNDERFLOW_THRESHOLD = INT4_QMAX * FP8_MIN_SUBNORMAL  # 7 * 2**-9


def get_format(fmt) -> FloatFormat:
    if isinstance(fmt, FloatFormat):
        return fmt
    try:
        return FORMATS[fmt]
    except KeyError:
        raise ValueError(f"unknown float format {fmt!r}") from None


def round_to_grid(x, fmt, mode: str = NEAREST_EVEN) -> np.ndarray:
    """Round ``x`` onto the value grid of ``fmt``; returns float64.

    Overflow saturates to the largest finite value (also for infinite input
    when the format has no infinity).  NaN propagates.
    """
    fmt = get_format(fmt)
    if mode not in ROUNDING_MODES:
        raise ValueError(f"unknown rounding mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    finite = np.isfinite(a)
    a_f = np.where(finite, a, 0.0)
    _, e = np.frexp(a_f)
    exp = np.maximum(e - 1, fmt.emin)
    quantum = np.ldexp(1.0, exp - fmt.man_bits)
    q = a_f / quantum
    q = np.rint(q) if mode == NEAREST_EVEN else np.floor(q)
    with np.errstate(over="ignore"):  # near DBL_MAX; saturated right after
        r = np.minimum(q * quantum, fmt.max_finite)
    if fmt.has_inf:
        r = np.where(np.isinf(a), np.inf, r)
    else:
        r = np.where(np.isinf(a), fmt.max_finite, r)
    r = np.copysign(r, x)
    r = np.where(np.isnan(x), np.nan, r)
    return r if r.ndim else r[()]


def _pack(values: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    # values are already on the grid of fmt
    v = np.asarray(values, dtype=np.float64)
    sign = np.signbit(v).astype(np.int64)
    a = np.abs(v)
    nan = np.isnan(v)
    inf = np.isinf(v)
    a_f = np.where(nan | inf, 0.0, a)
    _, e = np.frexp(a_f)
    unbiased = e - 1
    normal = a_f >= fmt.min_normal
    exp_field = np.where(normal, unbiased + fmt.bias, 0)
    man_normal = (np.ldexp(a_f, -unbiased) - 1.0) * (1 << fmt.man_bits)
    man_sub = a_f / fmt.min_subnormal
    man_field = np.where(normal, man_normal, man_sub).astype(np.int64)
    exp_all = (1 << fmt.exp_bits) - 1
    man_all = (1 << fmt.man_bits) - 1
    if fmt.has_inf:
        exp_field = np.where(inf | nan, exp_all, exp_field)
        man_field = np.where(inf, 0, man_field)
        man_field = np.where(nan, 1 << (fmt.man_bits - 1), man_field)
    else:
        exp_field = np.where(nan, exp_all, exp_field)
        man_field = np.where(nan, man_all, man_field)
    code = (sign << (fmt.width - 1)) | (exp_field << fmt.man_bits) | man_field
    return code.astype(fmt.code_dtype)


def encode(x, fmt, mode: str = NEAREST_EVEN) -> np.ndarray:
    """Round ``x`` into ``fmt`` and return the raw bit codes."""
    fmt = get_format(fmt)
    return _pack(round_to_grid(x, fmt, mode), fmt)


def decode(codes, fmt) -> np.ndarray:
    """Exact float64 value of each bit code."""
    fmt = get_format(fmt)
    c = np.asarray(codes).astype(np.int64)
    sign = (c >> (fmt.width - 1)) & 1
    exp_field = (c >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    man_field = c & ((1 << fmt.man_bits) - 1)
    sub = man_field * fmt.min_subnormal
    norm = np.ldexp(1.0 + man_field / float(1 << fmt.man_bits), exp_field - fmt.bias)
    val = np.where(exp_field == 0, sub, norm)
    exp_all = (1 << fmt.exp_bits) - 1
    if fmt.has_inf:
        special = exp_field == exp_all
        val = np.where(special & (man_field == 0), np.inf, val)
        val = np.where(special & (man_field != 0), np.nan, val)
    else:
        val = np.where((exp_field == exp_all) & (man_field == (1 << fmt.man_bits) - 1), np.nan, val)
    val = np.where(sign == 1, -val, val)
    return val if val.ndim else val[()]


def fp8_encode(x, mode: str = NEAREST_EVEN) -> np.ndarray:
    return encode(x, FP8_E4M3, mode)


def fp8_decode(codes) -> np.ndarray:
    return decode(codes, FP8_E4M3)


def bf16_encode(x) -> np.ndarray:
    return encode(x, BF16)


def bf16_decode(codes) -> np.ndarray:
    return decode(codes, BF16)


def fp16_encode(x) -> np.ndarray:
    return encode(x, FP16)


def fp16_decode(codes) -> np.ndarray:
    return decode(codes, FP16)


def quantize_to(x, fmt, mode: str = NEAREST_EVEN) -> np.ndarray:
    """Value-level rounding; ``"exact"``/``"fp64"`` pass through unchanged."""
    if fmt in ("exact", "fp64"):
        return np.asarray(x, dtype=np.float64)
    return round_to_grid(x, fmt, mode)


def round_half_even(x) -> int:
    """Nearest integer, ties to even (Python's ``round`` semantics)."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("round_half_even needs a finite input")
    return int(round(x))


def fp8_grid(include_negative: bool = False) -> np.ndarray:
    """Sorted finite FP8 values (non-negative half unless asked otherwise)."""
    codes = np.arange(0x7F, dtype=np.uint8)
    vals = fp8_decode(codes)
    if include_negative:
        vals = np.concatenate([-vals[1:], vals])
    return np.sort(vals)


def pack_int4(codes) -> np.ndarray:
    """Pack signed INT4 codes two per byte, low nibble first.

    An odd trailing code leaves the high nibble of the last byte zero.
    """
    c = np.asarray(codes, dtype=np.int64).ravel()
    if c.size and (c.min() < INT4_MIN or c.max() > INT4_MAX):
        raise ValueError("INT4 codes must lie in [-8, 7]")
    nib = (c & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, count: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_int4`; returns int8 codes."""
    b = np.asarray(packed, dtype=np.uint8).ravel()
    nib = np.empty(b.size * 2, dtype=np.int16)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = np.where(nib >= 8, nib - 16, nib).astype(np.int8)
    if count is not None:
        if count > nib.size:
            raise ValueError("count exceeds packed capacity")
        nib = nib[:count]
    return nib
