"""Seeded synthetic fixtures: Gaussian block weights and activations with
optional injected outliers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model_block import BlockWeights


@dataclass
class OutlierSpec:
    # key-side: whole RoPE pairs of W_k (and W_q) amplified, per head
    key_pairs: list = field(default_factory=list)
    key_scale: float = 1.0
    # weight-side: input columns amplified / shrunk in every linear layer
    weight_channels: list = field(default_factory=list)
    weight_scale: float = 1.0
    tiny_channels: list = field(default_factory=list)
    tiny_scale: float = 1.0
    # q/k/v default to constant-one CAS, so channel outliers go elsewhere
    weight_layers: tuple = ("o", "up", "gate", "down")
    # activation-side: input channels of x amplified
    act_channels: list = field(default_factory=list)
    act_scale: float = 1.0


@dataclass
class SyntheticConfig:
    seed: int = 0
    model_dim: int = 256
    n_heads: int = 4
    head_dim: int = 64
    ffn_dim: int = 512
    n_tokens: int = 128
    weight_std: float = 1.0
    act_std: float = 1.0
    outliers: OutlierSpec = field(default_factory=OutlierSpec)


def _scale_columns(W, cols, factor):
    if cols:
        W[:, cols] *= factor


def make_block(cfg: SyntheticConfig, rng=None) -> BlockWeights:
    """Weights with entries ``N(0, weight_std**2 / fan_in)``, then outliers."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    w = BlockWeights.random(rng, cfg.model_dim, cfg.n_heads, cfg.head_dim, cfg.ffn_dim,
                            cfg.weight_std)
    o = cfg.outliers
    half = cfg.head_dim // 2
    for h in range(cfg.n_heads):
        for p in o.key_pairs:
            for c in (p, p + half):
                w.W_k[h * cfg.head_dim + c] *= o.key_scale
    for name in o.weight_layers:
        W = getattr(w, f"W_{name}")
        _scale_columns(W, [c for c in o.weight_channels if c < W.shape[1]], o.weight_scale)
        _scale_columns(W, [c for c in o.tiny_channels if c < W.shape[1]], o.tiny_scale)
    return w


def make_activations(cfg: SyntheticConfig, n_tokens: int | None = None, rng=None) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    n = cfg.n_tokens if n_tokens is None else n_tokens
    x = rng.normal(size=(n, cfg.model_dim)) * cfg.act_std
    if cfg.outliers.act_channels:
        x[:, cfg.outliers.act_channels] *= cfg.outliers.act_scale
    return x


def make_fixture(cfg: SyntheticConfig):
    """``(weights, calibration activations, evaluation inputs)`` from one seed."""
    rng = np.random.default_rng(cfg.seed)
    weights = make_block(cfg, rng)
    calib = make_activations(cfg, rng=rng)
    inputs = make_activations(cfg, rng=rng)
    return weights, calib, inputs


def outlier_suite(seed: int) -> SyntheticConfig:
    """The fixed injected-outlier fixture used by the smoothing ablation.

    Toy-block dimensions, unit-variance inputs, two amplified key pairs per
    head, two amplified and 32 shrunken input channels in the CAS-smoothed
    layers.
    """
    return SyntheticConfig(
        seed=seed, model_dim=256, n_heads=4, head_dim=64, ffn_dim=512, n_tokens=128,
        weight_std=1.0, act_std=1.0,
        outliers=OutlierSpec(key_pairs=[3, 11], key_scale=8.0,
                             weight_channels=[5, 40], weight_scale=10.0,
                             tiny_channels=list(range(64, 96)), tiny_scale=0.1),
    )
