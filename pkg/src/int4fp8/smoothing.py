"""Linear-layer smoothing: channel-wise absmean scaling and per-tensor scaling.

Weights follow the ``Y = X @ W.T`` convention, so ``W`` is ``(N_out, N_in)``
and an input channel is a *column* of ``W``.  CAS multiplies columns by
``lambda`` and pushes ``1 / lambda`` onto the activations (or the rows of the
previous layer).  PTS multiplies the whole tensor by ``2**n`` and divides the
GEMM output by the same power of two.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import UNDERFLOW_THRESHOLD

CAS_MODES = ("mean-of-absmeans", "explicit", "constant-one")
UNDERFLOW_STABLE = "underflow-stable"
OVERFLOW_RISK = "overflow-risk"
PTS_MAX_EXPONENT = 60


@dataclass
class CasScales:
    lambdas: np.ndarray
    target_absmean: float
    mode: str = "mean-of-absmeans"

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if self.lambdas.ndim != 1:
            raise ValueError("lambdas must be 1-D")
        if not np.all(np.isfinite(self.lambdas)) or np.any(self.lambdas <= 0):
            raise ValueError("CAS scales must be finite and strictly positive")

    @classmethod
    def identity(cls, n: int) -> "CasScales":
        return cls(np.ones(n), 1.0, "constant-one")


@dataclass
class PtsResult:
    exponent: int
    stop_reason: str
    score_trace: list = field(default_factory=list)

    @property
    def delta(self) -> float:
        return float(2.0 ** self.exponent)


@dataclass
class SmoothingRecipe:
    """Everything needed to reproduce one layer's offline merge.

    ``rpn`` / ``crs`` are only filled for attention-adjacent layers.
    """

    cas: CasScales
    pts: Optional[PtsResult] = None
    rpn: Optional[object] = None
    crs: Optional[object] = None
    layer: str = ""

    def prepare_weight(self, W) -> np.ndarray:
        """``W @ diag(lambda) * 2**n``: the tensor that gets quantized."""
        W = apply_cas(W, self.cas)
        n = self.pts.exponent if self.pts is not None else 0
        return apply_pts(W, n)


def absmean(W, axis: int = 0) -> np.ndarray:
    return np.mean(np.abs(np.asarray(W, dtype=np.float64)), axis=axis)


def underflow_score(W) -> float:
    """Cumulative shortfall of ``|w|`` below ``7 * 2**-9``.

    Summed left to right over the row-major flattening so the value is
    reproducible bit for bit.
    """
    a = np.abs(np.asarray(W, dtype=np.float64)).ravel()
    short = np.maximum(0.0, UNDERFLOW_THRESHOLD - a)
    if short.size == 0:
        return 0.0
    # cumsum is strictly sequential, unlike np.sum's pairwise reduction
    return float(np.cumsum(short)[-1])


def _still_shrinking(a: np.ndarray, n: int) -> bool:
    # S(W 2^n) > S(W 2^(n+1)) iff some nonzero element is still below threshold
    scaled = np.ldexp(a, n)
    return bool(np.any((scaled > 0) & (scaled < UNDERFLOW_THRESHOLD)))


def _overflow_risk(a: np.ndarray, n: int) -> bool:
    lo = 7.0 * 2.0 ** (5 - n)
    hi = 7.0 * 2.0 ** (6 - n)
    return bool(np.any((a >= lo) & (a < hi)))


def compute_pts_exponent(W, max_exponent: int = PTS_MAX_EXPONENT) -> PtsResult:
    """Smallest ``n >= 0`` that is underflow-stable or at overflow risk.

    Underflow-stable means ``S(W 2^n) == S(W 2^(n+1))``, which is checked
    exactly: doubling strictly lowers the contribution of every nonzero
    element under the threshold, and zeros contribute a constant.  When both
    conditions hold the overflow-risk reason is reported.
    """
    a = np.abs(np.asarray(W, dtype=np.float64))
    if not np.all(np.isfinite(a)):
        raise ValueError("weights must be finite")
    trace = []
    for n in range(max_exponent + 1):
        trace.append(underflow_score(np.ldexp(a, n)))
        if _overflow_risk(a, n):
            return PtsResult(n, OVERFLOW_RISK, trace)
        if not _still_shrinking(a, n):
            return PtsResult(n, UNDERFLOW_STABLE, trace)
    raise ValueError("degenerate tensor: no PTS exponent found up to "
                     f"n={max_exponent}")


def compute_cas(W, target: str | float = "mean-of-absmeans") -> CasScales:
    """Per-input-channel scales ``lambda_i = target / absmean(column_i)``.

    ``target`` is a mode name or an explicit positive number.  The default
    target is the mean of the nonzero channel absmeans; all-zero channels get
    ``lambda = 1``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] < 1:
        raise ValueError("W must be a 2-D matrix with at least one column")
    n_in = W.shape[1]
    if target == "constant-one":
        return CasScales.identity(n_in)
    am = absmean(W, axis=0)
    live = am > 0
    if isinstance(target, str):
        if target not in ("mean-of-absmeans",):
            raise ValueError(f"unknown CAS target {target!r}")
        omega = float(np.mean(am[live])) if np.any(live) else 1.0
        mode = target
    else:
        omega = float(target)
        if not omega > 0:
            raise ValueError("explicit CAS target must be positive")
        mode = "explicit"
    lambdas = np.ones(n_in)
    lambdas[live] = omega / am[live]
    return CasScales(lambdas, omega, mode)


def apply_cas(W, cas: CasScales) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape[-1] != cas.lambdas.size:
        raise ValueError(f"W has {W.shape[-1]} input channels, CAS has {cas.lambdas.size}")
    return W * cas.lambdas[None, :]


def apply_inverse_cas(X, cas: CasScales) -> np.ndarray:
    """Online form: divide activation columns by ``lambda``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != cas.lambdas.size:
        raise ValueError("activation width does not match CAS scales")
    return X / cas.lambdas


def merge_inverse_cas(prev_W, cas: CasScales) -> np.ndarray:
    """Fold ``1 / lambda`` into the output rows of the producing layer."""
    prev_W = np.asarray(prev_W, dtype=np.float64)
    if prev_W.shape[0] != cas.lambdas.size:
        raise ValueError(f"previous layer has {prev_W.shape[0]} outputs, CAS has "
                         f"{cas.lambdas.size} channels")
    return prev_W / cas.lambdas[:, None]


def apply_pts(W, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("PTS exponent must be non-negative")
    return np.ldexp(np.asarray(W, dtype=np.float64), n)


def fold_inverse_pts(Y, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("PTS exponent must be non-negative")
    Y = np.asarray(Y)
    if Y.dtype == np.float32:
        return np.ldexp(Y, np.int32(-n)).astype(np.float32)
    return np.ldexp(Y.astype(np.float64), -n)


def group_maxima(W, group_size: int) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[None, :]
    if group_size <= 0 or W.shape[-1] % group_size:
        raise ValueError(f"last dimension {W.shape[-1]} is not divisible by "
                         f"group_size={group_size}")
    return np.max(np.abs(W).reshape(-1, group_size), axis=1)


def underflow_group_fraction(W, group_size: int = 128) -> float:
    """Fraction of quantization groups whose max magnitude is below ``7 * 2**-9``."""
    gm = group_maxima(W, group_size)
    if gm.size == 0:
        return 0.0
    return float(np.count_nonzero(gm < UNDERFLOW_THRESHOLD)) / gm.size


def calibrate_linear(W, cas_mode: str | float = "mean-of-absmeans", use_pts: bool = True,
                     layer: str = "") -> SmoothingRecipe:
    """CAS first, then PTS on the CAS-scaled tensor."""
    cas = compute_cas(W, cas_mode)
    if use_pts:
        pts = compute_pts_exponent(apply_cas(W, cas))
    else:
        pts = PtsResult(0, "disabled", [])
    return SmoothingRecipe(cas=cas, pts=pts, layer=layer)
