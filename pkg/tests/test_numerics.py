import math
import struct

import ml_dtypes
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from int4fp8.numerics import (
    FP8_NAN_CODE,
    bf16_decode,
    bf16_encode,
    decode,
    encode,
    fp16_decode,
    fp16_encode,
    fp8_decode,
    fp8_encode,
    fp8_grid,
    pack_int4,
    quantize_to,
    round_half_even,
    unpack_int4,
)

from oracles import FP8_TABLE, bf16_bitfield, fp16_bitfield, fp8_bitfield, fp8_encode_search

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def test_decode_matches_bitfields():
    codes = np.arange(256, dtype=np.uint8)
    got = fp8_decode(codes)
    for c in range(256):
        want = fp8_bitfield(c)
        if math.isnan(want):
            assert math.isnan(got[c])
        else:
            assert got[c] == want and math.copysign(1, got[c]) == math.copysign(1, want)


def test_nan_codes():
    assert FP8_NAN_CODE == 0x7F
    assert np.isnan(fp8_decode(np.array([0x7F, 0xFF], dtype=np.uint8))).all()


def test_fp8_against_ml_dtypes(rng):
    x = np.concatenate([rng.normal(size=20_000) * 10.0 ** rng.uniform(-4, 2, 20_000),
                        [v for _, v in FP8_TABLE]])
    x = x[np.abs(x) < 448]
    ref = x.astype(ml_dtypes.float8_e4m3fn).view(np.uint8)
    assert np.array_equal(fp8_encode(x), ref)


def test_bf16_fp16_against_ml_dtypes(rng):
    x = rng.normal(size=20_000) * 10.0 ** rng.uniform(-40, 30, 20_000)
    assert np.array_equal(bf16_encode(x), x.astype(ml_dtypes.bfloat16).view(np.uint16))
    h = x[np.abs(x) < 65504]
    assert np.array_equal(fp16_encode(h), h.astype(np.float16).view(np.uint16))


def test_encode_examples():
    assert fp8_encode(448.0) == 0x7E
    assert fp8_encode(0.0) == 0
    assert fp8_decode(fp8_encode(2.0 ** -9)) == 2.0 ** -9
    assert fp8_decode(fp8_encode(1.5 * 2.0 ** -10, "toward-zero")) == 0.0
    assert fp8_decode(fp8_encode(1.5 * 2.0 ** -10)) == 2.0 ** -9
    assert fp8_encode(-1e-5) == 0x80
    assert fp8_encode(-1000.0) == 0xFE
    assert fp8_encode(math.nan) == 0x7F
    assert fp16_decode(fp16_encode(65520.0)) == 65504.0
    assert bf16_encode(2.0 ** -130) == 8
    assert bf16_decode(bf16_encode(1e40)) == bf16_bitfield(0x7F7F)


def test_saturation_never_produces_nan():
    big = np.array([448.0, 449.0, 464.0, 1e30, -1e30])
    assert np.all(np.isfinite(fp8_decode(fp8_encode(big))))
    assert np.all(np.abs(quantize_to(big, "fp8")) == 448)


def test_round_half_even():
    assert round_half_even(-3.5) == -4
    assert round_half_even(2.5) == 2
    assert round_half_even(3.5) == 4
    assert round_half_even(7.4999) == 7


def test_grid():
    g = fp8_grid()
    assert g[0] == 0 and g[-1] == 448 and g.size == 127
    assert np.all(np.diff(g) > 0)
    assert np.array_equal(g, sorted(v for c, v in FP8_TABLE if c < 0x80))


def test_generic_roundtrip_all_formats():
    for fmt, n in (("fp8", 256), ("bf16", 1 << 16), ("fp16", 1 << 16)):
        codes = np.arange(n, dtype=np.uint8 if n == 256 else np.uint16)
        vals = decode(codes, fmt)
        ok = np.isfinite(vals)
        assert np.array_equal(encode(vals[ok], fmt), codes[ok]), fmt
    f16 = np.arange(1 << 16, dtype=np.uint16)
    f16 = f16[np.isfinite(fp16_decode(f16))]
    assert np.array_equal(fp16_decode(f16), [fp16_bitfield(int(c)) for c in f16])


@settings(max_examples=300, deadline=None)
@given(finite)
def test_encode_matches_search(x):
    x = max(-1e4, min(1e4, x))
    for mode in ("nearest-even", "toward-zero"):
        assert int(fp8_encode(x, mode)) == fp8_encode_search(x, mode)


@settings(max_examples=300, deadline=None)
@given(finite, finite)
def test_monotone(a, b):
    a, b = sorted((a, b))
    for mode in ("nearest-even", "toward-zero"):
        qa, qb = fp8_decode(fp8_encode([a, b], mode))
        assert qa <= qb


@settings(max_examples=300, deadline=None)
@given(st.floats(-448, 448))
def test_toward_zero_and_half_ulp(x):
    tz = float(fp8_decode(fp8_encode(x, "toward-zero")))
    assert abs(tz) <= abs(x)
    ne = float(fp8_decode(fp8_encode(x)))
    a = abs(x)
    # gap of the binade containing x (subnormal spacing below 2^-6)
    e = max(math.floor(math.log2(a)), -6) if a > 0 else -6
    assert abs(ne - x) <= 2.0 ** (e - 3) / 2


def test_pack_unpack_all_bytes():
    codes = np.array([(lo, hi) for hi in range(-8, 8) for lo in range(-8, 8)], dtype=np.int8).ravel()
    packed = pack_int4(codes)
    assert packed.size == 256
    assert sorted(packed.tolist()) == list(range(256))
    assert np.array_equal(unpack_int4(packed, codes.size), codes)
    # low nibble first
    assert pack_int4(np.array([1, -1], dtype=np.int8))[0] == 0xF1


def test_pack_odd_length_pads_high_nibble():
    packed = pack_int4(np.array([3, -2, 7], dtype=np.int8))
    assert packed.size == 2 and packed[1] >> 4 == 0
    assert np.array_equal(unpack_int4(packed, 3), [3, -2, 7])


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack_int4(np.array([8]))


def test_bf16_bitfield_is_struct_view():
    assert bf16_bitfield(0x3F80) == 1.0
    assert struct.pack("<f", 1.0)[2:] == b"\x80\x3f"
