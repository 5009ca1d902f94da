"""scikit-learn style wrappers around the functional modules.

The estimators follow the usual contract: hyper-parameters are stored
verbatim by ``__init__``, learned state gets a trailing underscore and is set
by ``fit``, and ``transform``/``predict`` refuse to run before ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attention_sim import PrecisionPolicy
from .gemm_sim import EpilogueSpec, int4fp8_gemm
from .model_block import BlockConfig, BlockWeights, calibrate_block, forward_quantized
from .quantizer import quantize_activations, quantize_weight
from .rope_calib import RopeConfig, apply_rope, calibrate_keys, compensate_queries, smooth_keys
from .smoothing import (
    apply_cas,
    apply_inverse_cas,
    apply_pts,
    calibrate_linear,
    compute_cas,
    compute_pts_exponent,
)

_POLICIES = {"mixed": PrecisionPolicy.mixed, "fp32": PrecisionPolicy.fp32,
             "exact": PrecisionPolicy.exact}


def _check_width(X, expected, what="X"):
    if X.shape[1] != expected:
        raise ValueError(f"{what} has {X.shape[1]} features, expected {expected}")


class ChannelAbsmeanScaler(TransformerMixin, BaseEstimator):
    """Equalize per-input-channel absmeans of a weight matrix.

    ``fit`` takes a weight ``W`` of shape ``(n_out, n_in)``; ``transform``
    returns ``W * lambda`` and ``inverse_transform`` undoes it.
    ``transform_activations`` gives the matching ``X / lambda``.
    """

    def __init__(self, target="mean-of-absmeans"):
        self.target = target

    def fit(self, W, y=None):
        W = check_array(W, dtype=np.float64)
        self.scales_ = compute_cas(W, self.target)
        self.lambdas_ = self.scales_.lambdas
        self.n_features_in_ = W.shape[1]
        return self

    def transform(self, W):
        check_is_fitted(self, "scales_")
        W = check_array(W, dtype=np.float64)
        _check_width(W, self.n_features_in_, "W")
        return apply_cas(W, self.scales_)

    def inverse_transform(self, W):
        check_is_fitted(self, "scales_")
        W = check_array(W, dtype=np.float64)
        _check_width(W, self.n_features_in_, "W")
        return W / self.lambdas_

    def transform_activations(self, X):
        check_is_fitted(self, "scales_")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.n_features_in_)
        return apply_inverse_cas(X, self.scales_)


class PerTensorScaler(TransformerMixin, BaseEstimator):
    """Power-of-two tensor scaling that lifts small weights out of FP8 underflow."""

    def __init__(self, max_exponent=60):
        self.max_exponent = max_exponent

    def fit(self, W, y=None):
        W = check_array(W, dtype=np.float64)
        self.result_ = compute_pts_exponent(W, self.max_exponent)
        self.exponent_ = self.result_.exponent
        self.stop_reason_ = self.result_.stop_reason
        return self

    def transform(self, W):
        check_is_fitted(self, "exponent_")
        return apply_pts(check_array(W, dtype=np.float64), self.exponent_)

    def inverse_transform(self, W):
        check_is_fitted(self, "exponent_")
        return np.ldexp(check_array(W, dtype=np.float64), -self.exponent_)


class QuantizedLinear(RegressorMixin, BaseEstimator):
    """``Y = X @ weight.T`` through the INT4 x FP8 kernel model.

    ``fit`` ignores its data apart from shape validation: the smoothing
    recipe depends on the weight only.  CAS scales are applied to the
    activations online at predict time.
    """

    def __init__(self, weight=None, group_size=128, cas_mode="mean-of-absmeans", use_pts=True,
                 scale_format="fp8", activation="none", output_format="bf16"):
        self.weight = weight
        self.group_size = group_size
        self.cas_mode = cas_mode
        self.use_pts = use_pts
        self.scale_format = scale_format
        self.activation = activation
        self.output_format = output_format

    def fit(self, X=None, y=None):
        if self.weight is None:
            raise ValueError("QuantizedLinear needs a weight matrix")
        W = check_array(self.weight, dtype=np.float64)
        if X is not None:
            _check_width(check_array(X, dtype=np.float64), W.shape[1])
        self.recipe_ = calibrate_linear(W, self.cas_mode, self.use_pts)
        self.qweight_ = quantize_weight(self.recipe_.prepare_weight(W), self.group_size,
                                        self.recipe_, self.scale_format)
        self.n_features_in_ = W.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "qweight_")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.n_features_in_)
        act = quantize_activations(apply_inverse_cas(X, self.recipe_.cas))
        ep = EpilogueSpec(self.activation, output_format=self.output_format)
        return int4fp8_gemm(act, self.qweight_, ep).astype(np.float64)

    def dequantized_weight(self):
        """Effective weight seen by unscaled activations."""
        check_is_fitted(self, "qweight_")
        return self.qweight_.dequantize() / self.recipe_.cas.lambdas


class KeySmoother(TransformerMixin, BaseEstimator):
    """Pair-norm (RPN) and outlier-channel (CRS) smoothing of one head's keys.

    ``fit`` takes pre-RoPE calibration keys; ``transform`` maps raw keys to
    smoothed post-RoPE keys and ``compensate`` prepares matching queries.
    """

    def __init__(self, alpha=8.0, beta=8.0, n_outlier_pairs=8, rope_base=10000.0,
                 use_rpn=True, use_crs=True):
        self.alpha = alpha
        self.beta = beta
        self.n_outlier_pairs = n_outlier_pairs
        self.rope_base = rope_base
        self.use_rpn = use_rpn
        self.use_crs = use_crs

    def fit(self, K, y=None):
        K = check_array(K, dtype=np.float64)
        self.rope_ = RopeConfig(K.shape[1], self.rope_base)
        self.rpn_, self.crs_ = calibrate_keys(K, self.rope_, self.alpha, self.beta,
                                              self.n_outlier_pairs, self.use_rpn, self.use_crs)
        self.outlier_pairs_ = list(self.crs_.outlier_pairs)
        self.n_features_in_ = K.shape[1]
        return self

    def transform(self, K, positions=None):
        check_is_fitted(self, "rpn_")
        K = check_array(K, dtype=np.float64)
        _check_width(K, self.n_features_in_, "K")
        return smooth_keys(K, self.rpn_, self.crs_, self.rope_, positions)

    def compensate(self, Q, positions=None):
        """RoPE the raw queries, then undo the key scaling on them."""
        check_is_fitted(self, "rpn_")
        Q = check_array(Q, dtype=np.float64)
        _check_width(Q, self.n_features_in_, "Q")
        return compensate_queries(apply_rope(Q, positions, self.rope_), self.rpn_, self.crs_)


class QuantizedTransformerBlock(RegressorMixin, BaseEstimator):
    """Toy transformer block calibrated on ``fit(X)`` and run quantized by ``predict``.

    ``weights`` is a :class:`~int4fp8.model_block.BlockWeights`.  ``score``
    (from :class:`RegressorMixin`) compares against any target; use
    :meth:`relative_error` for the error against the full-precision block.
    """

    def __init__(self, weights=None, group_size=128, alpha=8.0, beta=8.0, outlier_pairs=8,
                 scale_format="fp8", use_cas=True, use_pts=True, use_rpn=True, use_crs=True,
                 policy="mixed", causal=True):
        self.weights = weights
        self.group_size = group_size
        self.alpha = alpha
        self.beta = beta
        self.outlier_pairs = outlier_pairs
        self.scale_format = scale_format
        self.use_cas = use_cas
        self.use_pts = use_pts
        self.use_rpn = use_rpn
        self.use_crs = use_crs
        self.policy = policy
        self.causal = causal

    def _config(self):
        return BlockConfig(group_size=self.group_size, alpha=self.alpha, beta=self.beta,
                           outlier_pairs=self.outlier_pairs, scale_format=self.scale_format,
                           causal=self.causal, use_cas=self.use_cas, use_pts=self.use_pts,
                           use_rpn=self.use_rpn, use_crs=self.use_crs)

    def fit(self, X, y=None):
        if not isinstance(self.weights, BlockWeights):
            raise ValueError("weights must be a BlockWeights instance")
        if self.policy not in _POLICIES:
            raise ValueError(f"policy must be one of {sorted(_POLICIES)}")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.weights.model_dim)
        self.block_ = calibrate_block(self.weights, X, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def _forward(self, X):
        check_is_fitted(self, "block_")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.n_features_in_)
        return forward_quantized(self.block_, X, _POLICIES[self.policy]())

    def predict(self, X):
        return self._forward(X)[0]

    def relative_error(self, X) -> float:
        return self._forward(X)[1]["relative_error"]
