"""RoPE and key smoothing for post-RoPE KV quantization.

Channel ``i`` pairs with ``i + d/2`` (half-split layout).  Two smoothing
stages act on the keys of one head:

* RPN: a scale shared inside each pair, applied *before* RoPE.  A shared
  scale commutes with the rotation, so it can be folded into the key
  projection and its inverse into the query projection.
* CRS: per-channel scales on a few outlier pairs, applied *after* RoPE.
  Distinct scales inside a pair do not commute with the rotation, so the
  query-side inverse is applied online, after RoPE.

Key matrices are ``(N, d)`` (token rows).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError("head_dim must be a positive even number")
        if not self.base > 0:
            raise ValueError("RoPE base must be positive")

    @property
    def n_pairs(self) -> int:
        return self.head_dim // 2

    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.n_pairs, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)

    def angles(self, positions) -> np.ndarray:
        """``theta[t, i] = t * base**(-2i/d)``, shape ``(N, d/2)``."""
        t = np.asarray(positions, dtype=np.float64)
        return np.multiply.outer(t, self.inv_freq())


@dataclass
class RpnScales:
    s: np.ndarray  # one scale per pair
    alpha: float = 8.0

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if np.any(self.s <= 0):
            raise ValueError("RPN scales must be positive")

    @property
    def per_channel(self) -> np.ndarray:
        return np.concatenate([self.s, self.s])

    @classmethod
    def identity(cls, n_pairs: int, alpha: float = 1.0) -> "RpnScales":
        return cls(np.ones(n_pairs), alpha)


@dataclass
class CrsScales:
    """Per-channel scales on the selected outlier pairs; 1 elsewhere."""

    t: np.ndarray  # length d
    outlier_pairs: list = field(default_factory=list)
    beta: float = 8.0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.outlier_pairs = sorted(int(p) for p in self.outlier_pairs)
        if np.any(self.t <= 0):
            raise ValueError("CRS scales must be positive")

    @classmethod
    def identity(cls, head_dim: int, beta: float = 8.0) -> "CrsScales":
        return cls(np.ones(head_dim), [], beta)

    def channels(self) -> np.ndarray:
        half = self.t.size // 2
        p = np.asarray(self.outlier_pairs, dtype=np.int64)
        return np.sort(np.concatenate([p, p + half]))


def _check_width(x: np.ndarray, d: int):
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected an (N, {d}) matrix, got shape {x.shape}")


def apply_rope(x, positions=None, cfg: RopeConfig | None = None) -> np.ndarray:
    """Rotate each channel pair ``(x_i, x_{i+d/2})`` by ``theta_i^t``.

    Uses the ``(x_i cos - x_j sin, x_i sin + x_j cos)`` orientation; the
    choice of orientation does not affect relative-position scores.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg is None:
        cfg = RopeConfig(x.shape[-1])
    _check_width(x, cfg.head_dim)
    if positions is None:
        positions = np.arange(x.shape[0])
    theta = cfg.angles(positions)
    if theta.shape[0] != x.shape[0]:
        raise ValueError("one position per row is required")
    c, s = np.cos(theta), np.sin(theta)
    h = cfg.n_pairs
    xi, xj = x[:, :h], x[:, h:]
    return np.concatenate([xi * c - xj * s, xi * s + xj * c], axis=1)


def pair_norms(K) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    h = K.shape[1] // 2
    return np.hypot(K[:, :h], K[:, h:])


def compute_rpn(K_calib, alpha: float = 8.0) -> RpnScales:
    """``s = alpha * max_n ||(k_i, k_j)||``; all-zero pairs get ``s = alpha``."""
    K = np.asarray(K_calib, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] < 1 or K.shape[1] % 2:
        raise ValueError("K_calib must be (N >= 1, even d)")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    peak = np.max(pair_norms(K), axis=0)
    s = np.where(peak > 0, alpha * peak, alpha)
    return RpnScales(s, float(alpha))


def pair_peaks(K_post_rope) -> np.ndarray:
    """Per pair: ``max(max_n |k_i|, max_n |k_j|)``."""
    K = np.asarray(K_post_rope, dtype=np.float64)
    h = K.shape[1] // 2
    peak = np.max(np.abs(K), axis=0)
    return np.maximum(peak[:h], peak[h:])


def select_outlier_pairs(K_calib_post_rope, count: int = 8) -> list:
    peaks = pair_peaks(K_calib_post_rope)
    if count < 0 or count > peaks.size:
        raise ValueError(f"count must be in [0, {peaks.size}]")
    # stable sort on -peak keeps the lower index first among ties
    order = np.argsort(-peaks, kind="stable")
    return sorted(int(p) for p in order[:count])


def compute_crs(K_calib_post_rope, outlier_pairs, beta: float = 8.0) -> CrsScales:
    """``t_c = beta * max_n |k_c|`` on both channels of every outlier pair."""
    K = np.asarray(K_calib_post_rope, dtype=np.float64)
    if not beta > 0:
        raise ValueError("beta must be positive")
    d = K.shape[1]
    h = d // 2
    t = np.ones(d)
    peak = np.max(np.abs(K), axis=0)
    for p in outlier_pairs:
        if not 0 <= p < h:
            raise ValueError(f"pair index {p} out of range")
        for c in (p, p + h):
            t[c] = beta * peak[c] if peak[c] > 0 else beta
    return CrsScales(t, list(outlier_pairs), float(beta))


def smooth_keys(K_raw, rpn: RpnScales, crs: CrsScales | None, cfg: RopeConfig,
                positions=None) -> np.ndarray:
    """RPN divide, RoPE, then CRS divide on outlier channels."""
    K = np.asarray(K_raw, dtype=np.float64)
    _check_width(K, cfg.head_dim)
    out = apply_rope(K / rpn.per_channel, positions, cfg)
    if crs is not None:
        out = out / crs.t
    return out


def compensate_queries(Q_post_rope, rpn: RpnScales, crs: CrsScales | None) -> np.ndarray:
    """Multiply post-RoPE queries by ``s`` and ``t`` so scores are unchanged."""
    Q = np.asarray(Q_post_rope, dtype=np.float64)
    out = Q * rpn.per_channel
    if crs is not None:
        out = out * crs.t
    return out


def merge_rpn_into_key_projection(W_k, rpn: RpnScales) -> np.ndarray:
    """Scale key-projection output row ``c`` by ``1 / s_c``."""
    W_k = np.asarray(W_k, dtype=np.float64)
    s = rpn.per_channel
    if W_k.shape[0] != s.size:
        raise ValueError(f"W_k has {W_k.shape[0]} output channels, RPN covers {s.size}")
    return W_k / s[:, None]


def merge_rpn_into_query_projection(W_q, rpn: RpnScales) -> np.ndarray:
    """Inverse of the key merge: scale query-projection row ``c`` by ``s_c``."""
    W_q = np.asarray(W_q, dtype=np.float64)
    s = rpn.per_channel
    if W_q.shape[0] != s.size:
        raise ValueError(f"W_q has {W_q.shape[0]} output channels, RPN covers {s.size}")
    return W_q * s[:, None]


def calibrate_keys(K_calib, cfg: RopeConfig, alpha: float = 8.0, beta: float = 8.0,
                   n_outlier_pairs: int = 8, use_rpn: bool = True, use_crs: bool = True,
                   positions=None):
    """Full key calibration for one head; returns ``(rpn, crs)``.

    Outlier pairs are ranked on the raw post-RoPE keys; CRS factors are
    measured on the keys as they arrive at CRS (after RPN and RoPE).
    """
    K = np.asarray(K_calib, dtype=np.float64)
    rpn = compute_rpn(K, alpha) if use_rpn else RpnScales.identity(cfg.n_pairs, alpha)
    if not use_crs or n_outlier_pairs == 0:
        return rpn, CrsScales.identity(cfg.head_dim, beta)
    pairs = select_outlier_pairs(apply_rope(K, positions, cfg), n_outlier_pairs)
    pre_crs = smooth_keys(K, rpn, None, cfg, positions)
    return rpn, compute_crs(pre_crs, pairs, beta)
