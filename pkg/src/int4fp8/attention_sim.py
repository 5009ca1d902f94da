"""Tiled prefill attention with online softmax under a precision policy.

The consumer loop is simulated step for step in the order the pipelined
kernel commits and waits: the ``P @ V`` product for tile ``j - 1`` is added
to the accumulator *before* the running max is updated with tile ``j``, and
the rescale factor is applied to the accumulator afterwards.  Only that order
matters for the numerics, so no concurrency is modelled.

Values are carried as float64 arrays holding numbers rounded to the policy's
formats; ``"exact"`` means no rounding at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .gemm_sim import accumulate
from .numerics import FP16, quantize_to

_SCORE_FORMATS = ("fp16", "fp32", "exact")
_P_FORMATS = ("fp8", "fp32", "exact")
_OUT_FORMATS = ("bf16", "fp32", "exact")


@dataclass(frozen=True)
class PrecisionPolicy:
    score_format: str = "fp16"
    rowmax_format: str = "fp16"
    p_format: str = "fp8"
    p_scale: float = 1.0
    accum_format: str = "fp32"
    output_format: str = "bf16"
    exact_mode: bool = False

    def __post_init__(self):
        if self.exact_mode:
            for name in ("score_format", "rowmax_format", "p_format", "accum_format",
                         "output_format"):
                object.__setattr__(self, name, "exact")
            object.__setattr__(self, "p_scale", 1.0)
        if self.score_format not in _SCORE_FORMATS or self.rowmax_format not in _SCORE_FORMATS:
            raise ValueError("score/rowmax format must be fp16, fp32 or exact")
        if self.p_format not in _P_FORMATS:
            raise ValueError("p_format must be fp8, fp32 or exact")
        if self.output_format not in _OUT_FORMATS:
            raise ValueError("output_format must be bf16, fp32 or exact")
        if self.accum_format not in ("fp32", "exact"):
            raise ValueError("accumulation is fp32 (or exact in exact mode)")
        if not self.p_scale > 0:
            raise ValueError("p_scale must be positive")

    @classmethod
    def mixed(cls, **overrides) -> "PrecisionPolicy":
        """FP16 scores and row max, FP8 P, FP32 accumulation, BF16 output."""
        return cls(**overrides)

    @classmethod
    def exact(cls) -> "PrecisionPolicy":
        return cls(exact_mode=True)

    @classmethod
    def fp32(cls) -> "PrecisionPolicy":
        return cls("fp32", "fp32", "fp32", 1.0, "fp32", "fp32")

    @property
    def _acc_dtype(self):
        return np.float64 if self.accum_format == "exact" else np.float32

    def mask_value(self) -> float:
        # most negative finite value for FP16 keeps (-inf) - (-inf) out of the pipeline
        return -FP16.max_finite if self.score_format == "fp16" else -math.inf


@dataclass(frozen=True)
class TileSchedule:
    block_rows: int = 64
    block_cols: int = 64
    causal: bool = False
    tau: float | None = None

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("block sizes must be >= 1")

    def n_col_tiles(self, n: int) -> int:
        return max(1, math.ceil(n / self.block_cols))

    def resolved_tau(self, d: int) -> float:
        return 1.0 / math.sqrt(d) if self.tau is None else float(self.tau)


@dataclass
class TiledAttentionState:
    m: np.ndarray
    l: np.ndarray
    s: np.ndarray
    O: np.ndarray

    @classmethod
    def initial(cls, rows: int, d: int) -> "TiledAttentionState":
        return cls(np.full(rows, -np.inf), np.zeros(rows), np.ones(rows), np.zeros((rows, d)))


@dataclass
class TileTrace:
    """Per-(query block, key tile) record for debugging and invariant checks."""

    block: int
    tile: int
    m: np.ndarray
    l: np.ndarray
    p_rowsum: np.ndarray = field(repr=False)


def _check_qkv(Q, K, V):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[0] != K.shape[0] and K.shape[0] > 0:
        # prefill: one key per query position
        raise ValueError("prefill attention needs as many keys as queries")
    return Q, K, V


def causal_mask(n_q: int, n_k: int, q_offset: int = 0, k_offset: int = 0) -> np.ndarray:
    """True where the key position is in the future of the query position."""
    q = np.arange(n_q)[:, None] + q_offset
    k = np.arange(n_k)[None, :] + k_offset
    return k > q


def reference_attention(Q, K, V, causal: bool = False, tau: float | None = None) -> np.ndarray:
    """Full-precision ``softmax(tau Q K^T) V`` with fixed reduction order."""
    Q, K, V = _check_qkv(Q, K, V)
    tau = 1.0 / math.sqrt(Q.shape[1]) if tau is None else tau
    S = tau * accumulate(Q, K, np.float64)
    if causal:
        S = np.where(causal_mask(*S.shape), -np.inf, S)
    m = np.max(S, axis=1, keepdims=True)
    P = np.exp(S - m)
    P = P / np.cumsum(P, axis=1)[:, -1:]
    return accumulate(P, V.T, np.float64)


def quantize_p_tile(P_tile, policy: PrecisionPolicy) -> np.ndarray:
    """Encode a probability tile (entries in ``[0, 1]``) as ``round(p * p_scale)``."""
    P = np.asarray(P_tile, dtype=np.float64)
    return quantize_to(P * policy.p_scale, policy.p_format)


def _rowsum(P: np.ndarray, dtype) -> np.ndarray:
    return np.cumsum(P.astype(dtype), axis=1, dtype=dtype)[:, -1].astype(np.float64)


class _BlockRunner:
    """One query block's consumer loop."""

    def __init__(self, Q_blk, K, V, q0, schedule, policy, block_index, trace):
        self.Q = Q_blk
        self.K = K
        self.V = V
        self.q0 = q0
        self.sch = schedule
        self.pol = policy
        self.block = block_index
        self.trace = trace
        self.n = K.shape[0]
        self.tau = schedule.resolved_tau(Q_blk.shape[1])
        self.acc = policy._acc_dtype
        self.acc_fmt = "exact" if policy.accum_format == "exact" else "fp32"
        self.exp_fmt = policy.rowmax_format

    def _r(self, x, fmt):
        return quantize_to(x, fmt)

    def score_tile(self, j: int) -> np.ndarray:
        # stage 1 (S = Q K_j^T), then mask(tau * S)
        c0 = j * self.sch.block_cols
        c1 = min(c0 + self.sch.block_cols, self.n)
        S = accumulate(self.Q, self.K[c0:c1], self.acc)
        S = self._r(S, self.pol.score_format)
        S = self._r(self.tau * S, self.pol.score_format)
        width = self.sch.block_cols
        full = np.full((S.shape[0], width), self.pol.mask_value())
        full[:, :c1 - c0] = S
        masked = np.zeros_like(full, dtype=bool)
        masked[:, c1 - c0:] = True  # ragged tail
        if self.sch.causal:
            masked |= causal_mask(S.shape[0], width, self.q0, c0)
        return np.where(masked, self.pol.mask_value(), full)

    def rowmax(self, S) -> np.ndarray:
        return self._r(np.max(S, axis=1), self.pol.rowmax_format)

    def exp_tile(self, S, m) -> np.ndarray:
        diff = self._r(S - m[:, None], self.exp_fmt)
        with np.errstate(invalid="ignore"):
            P = self._r(np.exp(diff), self.exp_fmt)
        return np.nan_to_num(P, nan=0.0)

    def pv(self, O, P, j) -> np.ndarray:
        # stage 3: O += P_j @ V_j, accumulated into O in FP32
        c0 = j * self.sch.block_cols
        c1 = min(c0 + self.sch.block_cols, self.n)
        Pq = quantize_p_tile(P[:, :c1 - c0], self.pol)
        Vt = self.V[c0:c1].T  # producer-side transpose: layout only
        acc = O.astype(self.acc)
        for k in range(c1 - c0):
            acc += np.multiply.outer(Pq[:, k], Vt[:, k]).astype(self.acc)
        return acc.astype(np.float64)

    def record(self, j, st, P):
        if self.trace is not None:
            self.trace.append(TileTrace(self.block, j, st.m.copy(), st.l.copy(),
                                        _rowsum(P, np.float64)))

    def run(self) -> np.ndarray:
        st = TiledAttentionState.initial(self.Q.shape[0], self.V.shape[1])
        t_c = self.sch.n_col_tiles(self.n)
        r = self._r
        S = self.score_tile(0)
        st.m = np.maximum(st.m, self.rowmax(S))
        P = self.exp_tile(S, st.m)
        st.l = _rowsum(P, self.acc)
        self.record(0, st, P)
        pending, pending_j = P, 0
        for j in range(1, t_c):
            st.O = self.pv(st.O, pending, pending_j)
            S = self.score_tile(j)
            m_old = st.m
            st.m = np.maximum(m_old, self.rowmax(S))
            st.s = r(np.exp(r(m_old - st.m, self.acc_fmt)), self.acc_fmt)
            st.l = r(st.s * st.l, self.acc_fmt)
            P = self.exp_tile(S, st.m)
            st.l = r(st.l + _rowsum(P, self.acc), self.acc_fmt)
            st.O = r(st.s[:, None] * st.O, self.acc_fmt)
            self.record(j, st, P)
            pending, pending_j = P, j
        st.O = self.pv(st.O, pending, pending_j)
        inv_l = r(1.0 / st.l, self.acc_fmt)
        O = r(st.O * inv_l[:, None], self.acc_fmt)
        if self.pol.p_scale != 1.0:
            O = r(O / self.pol.p_scale, self.acc_fmt)
        return quantize_to(O, self.pol.output_format)


def tiled_attention_forward(Q, K, V, schedule: TileSchedule | None = None,
                            policy: PrecisionPolicy | None = None,
                            trace: list | None = None) -> np.ndarray:
    """Online-softmax attention over ``block_cols``-wide key/value tiles.

    Query blocks are independent; within a block tiles run in ascending order.
    Pass a list as ``trace`` to collect one :class:`TileTrace` per tile.
    """
    Q, K, V = _check_qkv(Q, K, V)
    schedule = schedule or TileSchedule()
    policy = policy or PrecisionPolicy()
    n = Q.shape[0]
    out = np.empty((n, V.shape[1]))
    for b, q0 in enumerate(range(0, n, schedule.block_rows)):
        q1 = min(q0 + schedule.block_rows, n)
        runner = _BlockRunner(Q[q0:q1], K, V, q0, schedule, policy, b, trace)
        out[q0:q1] = runner.run()
    return out


def with_scores(policy: PrecisionPolicy, fmt: str) -> PrecisionPolicy:
    return replace(policy, score_format=fmt, rowmax_format=fmt)
