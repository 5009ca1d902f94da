from dataclasses import replace

import numpy as np
import pytest

from int4fp8.attention_sim import PrecisionPolicy
from int4fp8.model_block import (
    BlockConfig,
    BlockWeights,
    ablation_config,
    calibrate_block,
    calibrate_recipe,
    forward_fp32,
    forward_quantized,
    quantize_block,
)
from int4fp8.synthetic import OutlierSpec, SyntheticConfig, make_fixture, outlier_suite

from oracles import block_forward_naive

# pinned from 10 seeded oracle runs at 256/4/64/512, N=128 (observed 0.37 to 0.42)
GAUSSIAN_BLOCK_TOL = 0.5


def _small(rng):
    return BlockWeights.random(rng, 128, 2, 64, 256)


def test_fp32_forward_matches_naive(rng):
    w = _small(rng)
    x = rng.normal(size=(20, 128))
    assert np.abs(forward_fp32(w, x) - block_forward_naive(w.as_dict(), x, 2)).max() <= 1e-10


def test_zero_input_gives_zero(rng):
    w = _small(rng)
    qb = calibrate_block(w, rng.normal(size=(32, 128)))
    out, rep = forward_quantized(qb, np.zeros((8, 128)))
    assert not out.any()
    assert rep["relative_error"] == 0.0


def test_single_token(rng):
    w = _small(rng)
    qb = calibrate_block(w, rng.normal(size=(32, 128)))
    out, rep = forward_quantized(qb, rng.normal(size=(1, 128)))
    assert out.shape == (1, 128) and rep["relative_error"] < GAUSSIAN_BLOCK_TOL


def test_merges_are_neutral(rng):
    cfg = outlier_suite(3)
    w, calib, x = make_fixture(replace(cfg, model_dim=128, ffn_dim=256, n_heads=2))
    qb = calibrate_block(w, calib)
    _, rep = forward_quantized(qb, x, PrecisionPolicy.exact(), quantize=False)
    assert rep["relative_error"] <= 1e-12


def test_gaussian_block_error():
    rng = np.random.default_rng(0)
    w = BlockWeights.random(rng, 256, 4, 64, 512)
    qb = calibrate_block(w, rng.normal(size=(128, 256)))
    _, rep = forward_quantized(qb, rng.normal(size=(128, 256)))
    assert rep["relative_error"] <= GAUSSIAN_BLOCK_TOL
    assert rep["gemm"]["lut_lookups"] > 0


def test_recipe_then_quantize_equals_calibrate(rng):
    w = _small(rng)
    calib = rng.normal(size=(32, 128))
    a = calibrate_block(w, calib)
    b = quantize_block(w, calibrate_recipe(w, calib))
    for name in a.qweights:
        assert np.array_equal(a.qweights[name].codes, b.qweights[name].codes)
        assert np.array_equal(a.qweights[name].scales, b.qweights[name].scales)


def test_injected_outliers_are_found():
    w, calib, _ = make_fixture(outlier_suite(0))
    qb = calibrate_block(w, calib)
    for pairs in qb.outlier_pair_sets():
        assert {3, 11} <= set(pairs)
    lam = qb.recipes["up"].cas.lambdas
    assert lam[64:96].min() > lam[:64].max() / 2  # shrunken channels are boosted
    assert lam[5] < 1 and lam[40] < 1


def test_config_validation(rng):
    with pytest.raises(ValueError):
        BlockConfig(cas_modes={"attn": "constant-one"})
    with pytest.raises(ValueError):
        BlockConfig.from_dict({"nope": 1})
    cfg = BlockConfig(group_size=64)
    assert BlockConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        calibrate_block(_small(rng), rng.normal(size=(4, 128)), BlockConfig(group_size=96))
    with pytest.raises(ValueError):
        BlockWeights.random(rng, 128, 3, 63, 256)


def test_ablation_config():
    cfg = ablation_config(BlockConfig(), rpn_crs=True)
    assert (cfg.use_rpn, cfg.use_crs, cfg.use_cas, cfg.use_pts) == (True, True, False, False)


def test_smoothing_helps_small_weights():
    # weights small enough that most FP8 group scales underflow
    none, full = [], []
    for seed in range(8):
        cfg = SyntheticConfig(seed=seed, model_dim=128, n_heads=2, head_dim=64, ffn_dim=256,
                              n_tokens=64, weight_std=0.05,
                              outliers=OutlierSpec(tiny_channels=list(range(16)), tiny_scale=0.1))
        w, calib, x = make_fixture(cfg)
        for bucket, conf in ((none, ablation_config(BlockConfig())), (full, BlockConfig())):
            _, rep = forward_quantized(calibrate_block(w, calib, conf), x)
            bucket.append(rep["relative_error"])
    assert np.median(full) < np.median(none)
