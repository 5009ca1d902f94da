import math

import numpy as np
import pytest

from int4fp8.quantizer import quantize_kv
from int4fp8.rope_calib import (
    CrsScales,
    RopeConfig,
    RpnScales,
    apply_rope,
    calibrate_keys,
    compensate_queries,
    compute_crs,
    compute_rpn,
    merge_rpn_into_key_projection,
    merge_rpn_into_query_projection,
    pair_norms,
    select_outlier_pairs,
    smooth_keys,
)

from oracles import rope_loop


def test_rope_matches_loop(rng):
    x = rng.normal(size=(40, 64))
    assert np.allclose(apply_rope(x), rope_loop(x), atol=1e-12)


def test_rope_identity_at_zero_and_quarter_turn():
    x = np.array([[3.0, -2.0]])
    assert np.array_equal(apply_rope(x, [0]), x)
    y = apply_rope(np.array([[1.0, 0.0]]), [math.pi / 2])
    assert np.allclose(y, [[0.0, 1.0]], atol=1e-15)


def test_rope_preserves_pair_norms(rng):
    x = rng.normal(size=(17, 32))
    assert np.allclose(pair_norms(apply_rope(x)), pair_norms(x))


def test_rope_relative_position(rng):
    q, k = rng.normal(size=(2, 1, 16))
    a = apply_rope(q, [7]) @ apply_rope(k, [3]).T
    b = apply_rope(q, [104]) @ apply_rope(k, [100]).T
    assert np.allclose(a, b)


def test_rope_config_checks():
    with pytest.raises(ValueError):
        RopeConfig(7)
    with pytest.raises(ValueError):
        apply_rope(np.ones((2, 4)), [0])


def test_shared_pair_scale_commutes(rng):
    K = rng.normal(size=(9, 16))
    rpn = RpnScales(rng.uniform(0.5, 4, 8))
    assert np.allclose(apply_rope(K / rpn.per_channel), apply_rope(K) / rpn.per_channel)


def test_split_pair_scale_does_not_commute(rng):
    K = rng.normal(size=(9, 16))
    t = np.ones(16)
    t[2] = 4.0  # channel 2 scaled, its partner 10 left alone
    assert not np.allclose(apply_rope(K / t), apply_rope(K) / t)


def test_rpn_values():
    K = np.zeros((2, 4))
    K[0, 0], K[0, 2] = 3.0, 4.0
    rpn = compute_rpn(K, alpha=8.0)
    assert rpn.s.tolist() == [40.0, 8.0]  # all-zero pair falls back to alpha


def test_crs_values():
    K = np.zeros((3, 8))
    K[1, 1] = -2.0
    K[2, 5] = 0.5
    crs = compute_crs(K, [1], beta=8.0)
    assert crs.t[1] == 16.0 and crs.t[5] == 4.0
    assert np.count_nonzero(crs.t != 1) == 2
    assert crs.channels().tolist() == [1, 5]
    with pytest.raises(ValueError):
        compute_crs(K, [4])


def test_select_outlier_pairs():
    K = np.zeros((2, 8))
    K[0, 6] = 9.0   # pair 2 via its upper channel
    K[1, 1] = -5.0  # pair 1
    assert select_outlier_pairs(K, 2) == [1, 2]
    assert select_outlier_pairs(K, 1) == [2]
    # ties keep the lower index
    assert select_outlier_pairs(np.ones((1, 8)), 2) == [0, 1]
    assert select_outlier_pairs(K, 0) == []
    with pytest.raises(ValueError):
        select_outlier_pairs(K, 5)


def _outlier_keys(rng, n, d, pairs=(3, 11), scale=30.0):
    K = rng.normal(size=(n, d))
    for p in pairs:
        K[:, [p, p + d // 2]] *= scale
    return K


def test_norm_bound_on_calibration_data(rng):
    for d in (64, 128):
        K = _outlier_keys(rng, 200, d)
        cfg = RopeConfig(d)
        rpn, crs = calibrate_keys(K, cfg)
        assert pair_norms(K / rpn.per_channel).max() <= 1 / 8 + 1e-12
        assert pair_norms(smooth_keys(K, rpn, None, cfg)).max() <= 1 / 8 + 1e-12
        assert {3, 11} <= set(crs.outlier_pairs)


def test_scores_invariant_on_fresh_data(rng):
    d = 64
    cfg = RopeConfig(d)
    rpn, crs = calibrate_keys(_outlier_keys(rng, 64, d), cfg)
    Q, K = rng.normal(size=(40, d)), _outlier_keys(rng, 40, d) * 3  # beyond the calibration range
    S = compensate_queries(apply_rope(Q), rpn, crs) @ smooth_keys(K, rpn, crs, cfg).T
    R = apply_rope(Q) @ apply_rope(K).T
    assert np.linalg.norm(S - R) / np.linalg.norm(R) < 1e-12


def test_merged_projection_matches_online(rng):
    d, dm = 64, 96
    cfg = RopeConfig(d)
    W_q, W_k = rng.normal(size=(2, d, dm))
    x = rng.normal(size=(30, dm))
    rpn, crs = calibrate_keys(x @ W_k.T, cfg)
    k_merged = apply_rope(x @ merge_rpn_into_key_projection(W_k, rpn).T) / crs.t
    assert np.abs(k_merged - smooth_keys(x @ W_k.T, rpn, crs, cfg)).max() <= 1e-9
    q_merged = apply_rope(x @ merge_rpn_into_query_projection(W_q, rpn).T) * crs.t
    q_online = compensate_queries(apply_rope(x @ W_q.T), rpn, crs)
    assert np.abs(q_merged - q_online).max() <= 1e-9 * np.abs(q_online).max()


def test_disabled_stages_are_identity(rng):
    K = rng.normal(size=(8, 16))
    cfg = RopeConfig(16)
    rpn, crs = calibrate_keys(K, cfg, use_rpn=False, use_crs=False)
    assert np.array_equal(smooth_keys(K, rpn, crs, cfg), apply_rope(K))
    assert isinstance(crs, CrsScales) and crs.outlier_pairs == []


def _score_error(Q, K, rpn, crs, cfg):
    q = compensate_queries(apply_rope(Q), rpn, crs)
    k = quantize_kv(smooth_keys(K, rpn, crs, cfg)).dequantize()
    R = apply_rope(Q) @ apply_rope(K).T
    return np.linalg.norm(q @ k.T - R) / np.linalg.norm(R)


def test_smoothing_reduces_key_quantization_error():
    d = 64
    cfg = RopeConfig(d)
    plain, smoothed = [], []
    for seed in range(30):
        rng = np.random.default_rng(seed)
        K = _outlier_keys(rng, 128, d)
        Q = rng.normal(size=(128, d))
        off = calibrate_keys(K, cfg, use_rpn=False, use_crs=False)
        on = calibrate_keys(K, cfg)
        plain.append(_score_error(Q, K, *off, cfg))
        smoothed.append(_score_error(Q, K, *on, cfg))
    assert np.median(smoothed) < np.median(plain)


def test_crs_channels_bounded_on_calibration_data(rng):
    cfg = RopeConfig(64)
    K = _outlier_keys(rng, 100, 64)
    rpn, crs = calibrate_keys(K, cfg, beta=8.0)
    smoothed = smooth_keys(K, rpn, crs, cfg)
    assert np.abs(smoothed[:, crs.channels()]).max() <= 1 / 8 + 1e-12
