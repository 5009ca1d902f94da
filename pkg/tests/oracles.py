"""Independent reference implementations used by the tests.

Nothing here imports the package's arithmetic: values come from bit-field
evaluation, exhaustive grid search, exact rationals or plain Python loops.
"""
from __future__ import annotations

import math
import struct
from fractions import Fraction

import numpy as np


# -- FP8 E4M3 -----------------------------------------------------------------

def fp8_bitfield(code: int) -> float:
    """Value of an E4M3 code from its sign / exponent / mantissa fields."""
    sign = -1.0 if code & 0x80 else 1.0
    exp = (code >> 3) & 0xF
    man = code & 0x7
    if exp == 0xF and man == 0x7:
        return math.nan
    if exp == 0:
        return sign * (man / 8) * 2.0 ** -6
    return sign * (1 + man / 8) * 2.0 ** (exp - 7)


FP8_TABLE = [(c, fp8_bitfield(c)) for c in range(256) if not math.isnan(fp8_bitfield(c))]


def fp8_encode_search(x: float, mode: str = "nearest-even") -> int:
    """Exhaustive search over the 127 non-negative finite codes; the sign bit
    follows the sign of ``x`` (negative values that round to zero give -0)."""
    if math.isnan(x):
        return 0x7F
    pos = [(c, v) for c, v in FP8_TABLE if c < 0x80]
    a = abs(x)
    if mode == "toward-zero":
        code = max((v, c) for c, v in pos if v <= a)[1]
    elif a >= 448:
        code = 0x7E
    else:
        code = nearest_even_on_grid(a, pos)
    return code | (0x80 if math.copysign(1.0, x) < 0 else 0)


def fp8_grid_fractions() -> list:
    return sorted({Fraction(v) for _, v in FP8_TABLE if v >= 0})


# -- BF16 / FP16 ----------------------------------------------------------------

def bf16_bitfield(code: int) -> float:
    return struct.unpack("<f", struct.pack("<I", (code & 0xFFFF) << 16))[0]


def fp16_bitfield(code: int) -> float:
    sign = -1.0 if code & 0x8000 else 1.0
    exp = (code >> 10) & 0x1F
    man = code & 0x3FF
    if exp == 0x1F:
        return math.nan if man else sign * math.inf
    if exp == 0:
        return sign * (man / 1024) * 2.0 ** -14
    return sign * (1 + man / 1024) * 2.0 ** (exp - 15)


def nearest_even_on_grid(x: float, grid_codes_values) -> int:
    """Nearest-even over an explicit (code, value) list of one sign."""
    d = min(abs(v - x) for _, v in grid_codes_values)
    ties = [c for c, v in grid_codes_values if abs(v - x) == d]
    even = [c for c in ties if c % 2 == 0]
    return (even or ties)[0]


# -- INT4 with FP8 scale, exact rationals ---------------------------------------

def int4_group_oracle(values) -> tuple:
    """``(scale_value, codes)`` with every step in exact rationals."""
    xs = [Fraction(float(v)) for v in values]
    sigma_exact = max(abs(x) for x in xs) / 7
    grid = fp8_grid_fractions()
    scale = max(g for g in grid if g <= sigma_exact)
    if scale == 0:
        return Fraction(0), [0] * len(xs)
    codes = [max(-8, min(7, round(x / scale))) for x in xs]  # Fraction rounds half to even
    return scale, codes


# -- PTS, literal definition ----------------------------------------------------

THRESH = Fraction(7, 2 ** 9)


def underflow_score_exact(mags, n: int) -> Fraction:
    scale = Fraction(2) ** n
    return sum((max(Fraction(0), THRESH - m * scale) for m in mags), Fraction(0))


def pts_bruteforce(W, n_max: int = 60) -> tuple:
    """Scan n upward: stop when ``S(W 2^n) == S(W 2^(n+1))`` or some element
    sits in ``[7 * 2^(5-n), 7 * 2^(6-n))``.  Overflow risk wins ties."""
    mags = [abs(Fraction(float(v))) for v in np.asarray(W).ravel()]
    prev = underflow_score_exact(mags, 0)
    for n in range(n_max + 1):
        lo, hi = Fraction(7) * Fraction(2) ** (5 - n), Fraction(7) * Fraction(2) ** (6 - n)
        risk = any(lo <= m < hi for m in mags)
        nxt = underflow_score_exact(mags, n + 1)
        if risk:
            return n, "overflow-risk"
        if prev == nxt:
            return n, "underflow-stable"
        prev = nxt
    return None, None


# -- linear algebra ---------------------------------------------------------------

def naive_matmul_t(A, B) -> np.ndarray:
    """``A @ B.T`` with Python triple loops and exactly rounded sums."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    out = np.zeros((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = math.fsum(float(a) * float(b) for a, b in zip(A[i], B[j]))
    return out


def rope_loop(x, base: float = 10000.0) -> np.ndarray:
    """Per-token, per-pair 2x2 rotation (pairs ``(i, i + d/2)``)."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    h = d // 2
    out = np.empty_like(x)
    for t in range(n):
        for i in range(h):
            th = t * base ** (-2 * i / d)
            c, s = math.cos(th), math.sin(th)
            a, b = x[t, i], x[t, i + h]
            out[t, i] = a * c - b * s
            out[t, i + h] = a * s + b * c
    return out


def softmax_attention_loop(Q, K, V, causal=False, tau=None) -> np.ndarray:
    Q, K, V = (np.asarray(a, dtype=float) for a in (Q, K, V))
    n, d = Q.shape
    tau = 1 / math.sqrt(d) if tau is None else tau
    out = np.zeros((n, V.shape[1]))
    for i in range(n):
        keys = range(i + 1) if causal else range(K.shape[0])
        s = [tau * math.fsum(Q[i] * K[j]) for j in keys]
        m = max(s)
        w = [math.exp(v - m) for v in s]
        z = math.fsum(w)
        for c in range(V.shape[1]):
            out[i, c] = math.fsum(wj * V[j, c] for wj, j in zip(w, keys)) / z
    return out


def block_forward_naive(W: dict, x, n_heads: int, causal=True) -> np.ndarray:
    """Toy block written out directly with numpy."""
    x = np.asarray(x, dtype=float)
    Q, K, V = x @ W["q"].T, x @ W["k"].T, x @ W["v"].T
    hd = Q.shape[1] // n_heads
    n = x.shape[0]
    heads = []
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        q, k = rope_loop(Q[:, sl]), rope_loop(K[:, sl])
        S = q @ k.T / math.sqrt(hd)
        if causal:
            S = np.where(np.triu(np.ones((n, n), bool), 1), -np.inf, S)
        P = np.exp(S - S.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        heads.append(P @ V[:, sl])
    A = np.concatenate(heads, axis=1)
    Y = A @ W["o"].T
    g = Y @ W["gate"].T
    H = g / (1 + np.exp(-g)) * (Y @ W["up"].T)
    return H @ W["down"].T
