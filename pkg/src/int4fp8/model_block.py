"""A single toy transformer block wired end to end.

Layout (no biases, no norms, no residuals)::

    x -> q, k, v projections -> RoPE -> causal attention per head -> o_proj
      -> down( silu(gate(h)) * up(h) )

Offline merges:

* CAS of ``down`` folds its inverse into the rows of ``up``
  (``silu(g) * (u / lam) == (silu(g) * u) / lam``);
* CAS shared by ``up``/``gate`` folds into the rows of ``o_proj``;
* CAS of ``o_proj`` folds into the rows of ``v`` (attention mixes tokens,
  not channels, so per-channel scaling of V passes through);
* ``q``/``k``/``v`` have no producing layer; their CAS defaults to the
  constant-one mode and any non-trivial scale is applied online to ``x``;
* RPN folds into ``k`` (divide) and ``q`` (multiply);
* CRS is applied online after RoPE: keys divided, queries multiplied.

Each layer's CAS is computed after everything downstream has been folded
into it, i.e. in reverse topological order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .attention_sim import PrecisionPolicy, TileSchedule, reference_attention, tiled_attention_forward
from .gemm_sim import EpilogueSpec, GemmTrace, int4fp8_gemm, reference_gemm
from .quantizer import quantize_activations, quantize_kv, quantize_weight
from .rope_calib import RopeConfig, apply_rope, calibrate_keys
from .smoothing import (
    CasScales,
    PtsResult,
    SmoothingRecipe,
    apply_cas,
    apply_inverse_cas,
    compute_cas,
    compute_pts_exponent,
    fold_inverse_pts,
    merge_inverse_cas,
)

LAYERS = ("q", "k", "v", "o", "up", "gate", "down")
CAS_GROUPS = ("qkv", "o", "upgate", "down")
DEFAULT_CAS_MODES = {
    "qkv": "constant-one",
    "o": "mean-of-absmeans",
    "upgate": "mean-of-absmeans",
    "down": "mean-of-absmeans",
}


@dataclass
class BlockWeights:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    W_up: np.ndarray
    W_gate: np.ndarray
    W_down: np.ndarray
    n_heads: int = 1

    def __post_init__(self):
        for name in LAYERS:
            setattr(self, f"W_{name}", np.asarray(getattr(self, f"W_{name}"), dtype=np.float64))
        d_model = self.W_q.shape[1]
        inner = self.W_q.shape[0]
        ffn = self.W_up.shape[0]
        if inner % self.n_heads:
            raise ValueError("projection width must be a multiple of n_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")
        expected = {
            "q": (inner, d_model), "k": (inner, d_model), "v": (inner, d_model),
            "o": (d_model, inner), "up": (ffn, d_model), "gate": (ffn, d_model),
            "down": (d_model, ffn),
        }
        for name, shape in expected.items():
            got = getattr(self, f"W_{name}").shape
            if got != shape:
                raise ValueError(f"W_{name} has shape {got}, expected {shape}")

    @property
    def model_dim(self) -> int:
        return self.W_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[0] // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.W_up.shape[0]

    def as_dict(self) -> dict:
        return {name: getattr(self, f"W_{name}") for name in LAYERS}

    @classmethod
    def from_dict(cls, d: dict, n_heads: int) -> "BlockWeights":
        return cls(*(d[name] for name in LAYERS), n_heads=n_heads)

    @classmethod
    def random(cls, rng, model_dim=256, n_heads=4, head_dim=64, ffn_dim=512,
               std: float = 1.0) -> "BlockWeights":
        inner = n_heads * head_dim
        shapes = [(inner, model_dim)] * 3 + [(model_dim, inner), (ffn_dim, model_dim),
                                             (ffn_dim, model_dim), (model_dim, ffn_dim)]
        mats = []
        for shape in shapes:
            mats.append(rng.normal(size=shape) * std / np.sqrt(shape[1]))
        return cls(*mats, n_heads=n_heads)


@dataclass
class BlockConfig:
    group_size: int = 128
    alpha: float = 8.0
    beta: float = 8.0
    outlier_pairs: int = 8
    scale_format: str = "fp8"
    rope_base: float = 10000.0
    causal: bool = True
    use_cas: bool = True
    use_pts: bool = True
    use_rpn: bool = True
    use_crs: bool = True
    cas_modes: dict = field(default_factory=lambda: dict(DEFAULT_CAS_MODES))
    block_rows: int = 64
    block_cols: int = 64

    def __post_init__(self):
        unknown = set(self.cas_modes) - set(CAS_GROUPS)
        if unknown:
            raise ValueError(f"unknown CAS groups: {sorted(unknown)}")
        self.cas_modes = {**DEFAULT_CAS_MODES, **self.cas_modes}

    def schedule(self) -> TileSchedule:
        return TileSchedule(self.block_rows, self.block_cols, self.causal)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown block config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class QuantizedBlock:
    config: BlockConfig
    n_heads: int
    head_dim: int
    model_dim: int
    ffn_dim: int
    qweights: dict
    recipes: dict
    prepared: Optional[dict] = field(default=None, repr=False)
    input_cas: CasScales = None
    rpn: list = field(default_factory=list)
    crs: list = field(default_factory=list)
    source: Optional[BlockWeights] = field(default=None, repr=False)

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.config.rope_base)

    def outlier_pair_sets(self) -> list:
        return [list(c.outlier_pairs) for c in self.crs]

    def recipe(self) -> BlockRecipe:
        return BlockRecipe(self.config, self.recipes, self.input_cas, self.rpn, self.crs,
                           self.model_dim, self.n_heads, self.head_dim, self.ffn_dim)

    @classmethod
    def from_recipe(cls, recipe: BlockRecipe, qweights: dict,
                    source: BlockWeights | None = None) -> "QuantizedBlock":
        prepared = None
        if source is not None:
            W = merged_weights(source, recipe)
            prepared = {k: recipe.layers[k].prepare_weight(W[k]) for k in LAYERS}
        return cls(recipe.config, recipe.n_heads, recipe.head_dim, recipe.model_dim,
                   recipe.ffn_dim, qweights, recipe.layers, prepared, recipe.input_cas,
                   recipe.rpn, recipe.crs, source)


def _silu64(x):
    return x / (1.0 + np.exp(-x))


def forward_fp32(weights: BlockWeights, x, causal: bool = True, rope_base: float = 10000.0):
    """Full-precision reference forward of the block."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weights.model_dim:
        raise ValueError(f"x must be (N, {weights.model_dim})")
    cfg = RopeConfig(weights.head_dim, rope_base)
    Q = reference_gemm(x, weights.W_q)
    K = reference_gemm(x, weights.W_k)
    V = reference_gemm(x, weights.W_v)
    heads = []
    for h in _head_slices(weights.n_heads, weights.head_dim):
        heads.append(reference_attention(apply_rope(Q[:, h], None, cfg),
                                         apply_rope(K[:, h], None, cfg), V[:, h], causal))
    A = np.concatenate(heads, axis=1)
    Y = reference_gemm(A, weights.W_o)
    H = _silu64(reference_gemm(Y, weights.W_gate)) * reference_gemm(Y, weights.W_up)
    return reference_gemm(H, weights.W_down)


def _head_slices(n_heads, head_dim):
    return [slice(h * head_dim, (h + 1) * head_dim) for h in range(n_heads)]


def _cas(W, mode, enabled):
    if not enabled:
        return CasScales.identity(W.shape[1])
    return compute_cas(W, mode)


@dataclass
class BlockRecipe:
    """Every calibrated scale of a block; enough to redo all merges."""

    config: BlockConfig
    layers: dict  # layer name -> SmoothingRecipe
    input_cas: CasScales
    rpn: list
    crs: list
    model_dim: int
    n_heads: int
    head_dim: int
    ffn_dim: int

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.config.rope_base)


def _check_block_inputs(weights: BlockWeights, config: BlockConfig):
    for name, w in weights.as_dict().items():
        if w.shape[1] % config.group_size:
            raise ValueError(f"W_{name}: N_in={w.shape[1]} is not divisible by "
                             f"group_size={config.group_size}")


def _merge_rpn(W: dict, rpn_list, head_dim):
    for h, rpn in zip(_head_slices(len(rpn_list), head_dim), rpn_list):
        W["k"][h] = W["k"][h] / rpn.per_channel[:, None]
        W["q"][h] = W["q"][h] * rpn.per_channel[:, None]


def calibrate_recipe(weights: BlockWeights, calib_activations, config: BlockConfig | None = None
                     ) -> BlockRecipe:
    """Collect key statistics and compute every layer's smoothing scales.

    CAS groups are computed in reverse topological order so each one sees the
    rows already rescaled by the group after it.
    """
    config = config or BlockConfig()
    X = np.asarray(calib_activations, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != weights.model_dim:
        raise ValueError(f"calibration activations must be (N, {weights.model_dim})")
    if X.shape[0] < 1:
        raise ValueError("calibration activations are empty")
    _check_block_inputs(weights, config)
    rope = RopeConfig(weights.head_dim, config.rope_base)
    W = {k: v.copy() for k, v in weights.as_dict().items()}

    K = reference_gemm(X, W["k"])
    rpn_list, crs_list = [], []
    for h in _head_slices(weights.n_heads, weights.head_dim):
        rpn, crs = calibrate_keys(K[:, h], rope, config.alpha, config.beta,
                                  config.outlier_pairs, config.use_rpn, config.use_crs)
        rpn_list.append(rpn)
        crs_list.append(crs)
    _merge_rpn(W, rpn_list, weights.head_dim)

    modes = config.cas_modes
    cas = {}
    cas["down"] = _cas(W["down"], modes["down"], config.use_cas)
    W["up"] = merge_inverse_cas(W["up"], cas["down"])
    cas["upgate"] = _cas(np.vstack([W["up"], W["gate"]]), modes["upgate"], config.use_cas)
    W["o"] = merge_inverse_cas(W["o"], cas["upgate"])
    cas["o"] = _cas(W["o"], modes["o"], config.use_cas)
    W["v"] = merge_inverse_cas(W["v"], cas["o"])
    cas["qkv"] = _cas(np.vstack([W["q"], W["k"], W["v"]]), modes["qkv"], config.use_cas)

    layer_cas = {"q": cas["qkv"], "k": cas["qkv"], "v": cas["qkv"], "o": cas["o"],
                 "up": cas["upgate"], "gate": cas["upgate"], "down": cas["down"]}
    layers = {}
    for name in LAYERS:
        scaled = apply_cas(W[name], layer_cas[name])
        pts = compute_pts_exponent(scaled) if config.use_pts else PtsResult(0, "disabled", [])
        layers[name] = SmoothingRecipe(cas=layer_cas[name], pts=pts, layer=name)
    layers["k"].rpn, layers["k"].crs = rpn_list, crs_list
    return BlockRecipe(config, layers, cas["qkv"], rpn_list, crs_list, weights.model_dim,
                       weights.n_heads, weights.head_dim, weights.ffn_dim)


def merged_weights(weights: BlockWeights, recipe: BlockRecipe) -> dict:
    """Float weights after every offline merge, before CAS/PTS of the layer itself."""
    W = {k: v.copy() for k, v in weights.as_dict().items()}
    _merge_rpn(W, recipe.rpn, recipe.head_dim)
    L = recipe.layers
    W["up"] = merge_inverse_cas(W["up"], L["down"].cas)
    W["o"] = merge_inverse_cas(W["o"], L["up"].cas)
    W["v"] = merge_inverse_cas(W["v"], L["o"].cas)
    return W


def quantize_block(weights: BlockWeights, recipe: BlockRecipe) -> "QuantizedBlock":
    """Apply a recipe's merges and quantize every layer."""
    dims = (weights.model_dim, weights.n_heads, weights.head_dim, weights.ffn_dim)
    if dims != (recipe.model_dim, recipe.n_heads, recipe.head_dim, recipe.ffn_dim):
        raise ValueError(f"recipe dims {(recipe.model_dim, recipe.n_heads, recipe.head_dim, recipe.ffn_dim)}"
                         f" do not match weights {dims}")
    config = recipe.config
    _check_block_inputs(weights, config)
    W = merged_weights(weights, recipe)
    qweights = {}
    for name in LAYERS:
        r = recipe.layers[name]
        qweights[name] = quantize_weight(r.prepare_weight(W[name]), config.group_size, r,
                                         config.scale_format)
    return QuantizedBlock.from_recipe(recipe, qweights, source=weights)


def calibrate_block(weights: BlockWeights, calib_activations, config: BlockConfig | None = None
                    ) -> "QuantizedBlock":
    """Collect statistics, perform every offline merge and quantize all weights."""
    return quantize_block(weights, calibrate_recipe(weights, calib_activations, config))


class _QuantizedOps:
    """Linear layers through the INT4 x FP8 kernel model."""

    def __init__(self, qb: QuantizedBlock):
        self.qb = qb
        self.trace = GemmTrace()

    def linear(self, x, name, epilogue=None):
        return int4fp8_gemm(quantize_activations(x), self.qb.qweights[name], epilogue,
                            self.trace).astype(np.float64)

    def keys_values(self, K, V):
        return quantize_kv(K).dequantize(), quantize_kv(V).dequantize()

    def queries(self, Q):
        return quantize_activations(Q).dequantize()

    def gated(self, y):
        up = int4fp8_gemm(quantize_activations(y), self.qb.qweights["up"], None, self.trace)
        return self.linear(y, "gate", EpilogueSpec("silu", elementwise_multiplier=up))


class _PassthroughOps:
    """Same dataflow on the merged float weights, no quantization."""

    def __init__(self, qb: QuantizedBlock):
        if qb.prepared is None:
            raise ValueError("passthrough needs the source weights")
        self.qb = qb
        self.trace = None

    def linear(self, x, name, epilogue=None):
        n = self.qb.recipes[name].pts.exponent
        return fold_inverse_pts(reference_gemm(x, self.qb.prepared[name]), n)

    def keys_values(self, K, V):
        return K, V

    def queries(self, Q):
        return Q

    def gated(self, y):
        return _silu64(self.linear(y, "gate")) * self.linear(y, "up")


def _relative_error(out, ref) -> float:
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(out - ref) / denom) if denom > 0 else float(np.linalg.norm(out))


def forward_quantized(qblock: QuantizedBlock, x, policy: PrecisionPolicy | None = None,
                      quantize: bool = True, reference: BlockWeights | None = None):
    """Quantized block forward; returns ``(output, report)``.

    With ``quantize=False`` the merged float weights are used directly, which
    together with ``PrecisionPolicy.exact()`` must reproduce the FP32 forward.
    The report carries error metrics against ``reference`` (defaults to the
    weights the block was calibrated from).
    """
    policy = policy or PrecisionPolicy.mixed()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != qblock.model_dim:
        raise ValueError(f"x must be (N, {qblock.model_dim})")
    ops = _QuantizedOps(qblock) if quantize else _PassthroughOps(qblock)
    rope = qblock.rope
    cfg = qblock.config

    xin = apply_inverse_cas(x, qblock.input_cas)
    Q = ops.linear(xin, "q")
    K = ops.linear(xin, "k")
    V = ops.linear(xin, "v")
    heads = []
    for h, sl in enumerate(_head_slices(qblock.n_heads, qblock.head_dim)):
        crs = qblock.crs[h]
        q = ops.queries(apply_rope(Q[:, sl], None, rope) * crs.t)
        k, v = ops.keys_values(apply_rope(K[:, sl], None, rope) / crs.t, V[:, sl])
        heads.append(tiled_attention_forward(q, k, v, cfg.schedule(), policy))
    A = np.concatenate(heads, axis=1)
    Y = ops.linear(A, "o")
    H = ops.gated(Y)
    out = ops.linear(H, "down")

    report = {"quantized": bool(quantize)}
    reference = reference if reference is not None else qblock.source
    if reference is not None:
        ref = forward_fp32(reference, x, cfg.causal, cfg.rope_base)
        report["relative_error"] = _relative_error(out, ref)
        report["max_abs_error"] = float(np.max(np.abs(out - ref))) if out.size else 0.0
    if ops.trace is not None:
        report["gemm"] = {"multiplies": ops.trace.multiplies,
                          "lut_lookups": ops.trace.lut_lookups,
                          "scale_multiplies": ops.trace.scale_multiplies}
    return out, report


def ablation_config(base: BlockConfig, *, rpn_crs=False, cas=False, pts=False) -> BlockConfig:
    """Smoothing switches for the ablation ladder."""
    return replace(base, use_rpn=rpn_crs, use_crs=rpn_crs, use_cas=cas, use_pts=pts,
                   cas_modes=dict(base.cas_modes))
