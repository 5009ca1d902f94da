"""Built-in invariant checks behind ``int4fp8 selftest``.

Each check is self-contained, seeded, and returns a :class:`CheckResult`;
an exception inside a check counts as a failure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention_sim import PrecisionPolicy, TileSchedule, reference_attention, tiled_attention_forward
from .gemm_sim import dequant_op_count
from .model_block import BlockWeights, calibrate_block, forward_quantized
from .numerics import FP8_NAN_CODE, UNDERFLOW_THRESHOLD, fp8_decode, fp8_encode
from .quantizer import _lut_values, build_dequant_lut, int4_symmetric_quantize
from .rope_calib import RopeConfig, apply_rope, calibrate_keys, compensate_queries, pair_norms, smooth_keys
from .smoothing import OVERFLOW_RISK, UNDERFLOW_STABLE, compute_pts_exponent
from .tensorio import Tensor, decode_package, encode_package


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _fp8_roundtrip(rng, quick):
    codes = np.array([c for c in range(256) if c & 0x7F != FP8_NAN_CODE], dtype=np.uint8)
    back = fp8_encode(fp8_decode(codes))
    # +0 and -0 are distinct codes and both survive
    bad = int(np.sum(back != codes))
    return bad == 0, f"{codes.size} codes, {bad} mismatches"


def _fp8_monotone(rng, quick):
    x = np.sort(rng.uniform(-500, 500, 10_000 if quick else 100_000))
    y = fp8_decode(fp8_encode(x))
    ok = bool(np.all(np.diff(y) >= 0))
    return ok, f"{x.size} points"


def _underflow_groups(rng, quick):
    n = 100 if quick else 1000
    zero_ok = nonzero_ok = 0
    for _ in range(n):
        g = rng.uniform(-1, 1, 128) * UNDERFLOW_THRESHOLD * 0.999
        q = int4_symmetric_quantize(g)
        zero_ok += q.scale == 0 and not np.any(q.dequantize())
        g2 = g.copy()
        g2[rng.integers(128)] = UNDERFLOW_THRESHOLD * rng.choice([-1, 1]) * rng.uniform(1, 4)
        nonzero_ok += int4_symmetric_quantize(g2).scale_value > 0
    return zero_ok == n and nonzero_ok == n, f"{zero_ok}/{n} vanish, {nonzero_ok}/{n} survive"


def _lut(rng, quick):
    scales = np.array([s for s in range(256) if s & 0x7F != FP8_NAN_CODE], dtype=np.uint8)
    table = _lut_values(scales, "fp8")
    direct = np.stack([fp8_decode(build_dequant_lut(int(s))) for s in scales])
    sigma = fp8_decode(scales)[:, None]
    exact = fp8_decode(fp8_encode(sigma * np.arange(-8, 8)))
    ok = np.array_equal(table, direct) and np.array_equal(table, exact)
    return ok, f"{scales.size} scales x 16 codes"


def _pts_brute(rng, quick):
    trials = 20 if quick else 200
    bad = 0
    for _ in range(trials):
        W = rng.normal(size=(8, 16)) * 2.0 ** rng.integers(-14, 6)
        res = compute_pts_exponent(W)
        a = np.abs(W)
        for n in range(61):
            s = a * 2.0 ** n
            risk = np.any((s >= 7 * 2.0 ** 5) & (s < 7 * 2.0 ** 6))
            stable = not np.any((s > 0) & (s < UNDERFLOW_THRESHOLD))
            if risk or stable:
                want = (n, OVERFLOW_RISK if risk else UNDERFLOW_STABLE)
                break
        bad += (res.exponent, res.stop_reason) != want
    return bad == 0, f"{trials} matrices, {bad} disagreements"


def _rpn_bound(rng, quick):
    worst = 0.0
    for _ in range(10 if quick else 100):
        d = int(rng.choice([64, 128]))
        K = rng.normal(size=(int(rng.integers(1, 129)), d)) * rng.uniform(0.1, 50)
        cfg = RopeConfig(d)
        rpn, _ = calibrate_keys(K, cfg, 8.0, use_crs=False)
        pre = pair_norms(K / rpn.per_channel)
        post = pair_norms(smooth_keys(K, rpn, None, cfg))
        worst = max(worst, pre.max(), post.max())
    return worst <= 1 / 8 + 1e-9, f"max scaled pair norm {worst:.12f}"


def _score_invariance(rng, quick):
    worst = 0.0
    for _ in range(5 if quick else 50):
        d = 64
        cfg = RopeConfig(d)
        Q, K = rng.normal(size=(2, 32, d))
        K[:, [3, 35]] *= 30
        rpn, crs = calibrate_keys(K, cfg)
        S = compensate_queries(apply_rope(Q, None, cfg), rpn, crs) @ smooth_keys(K, rpn, crs, cfg).T
        R = apply_rope(Q, None, cfg) @ apply_rope(K, None, cfg).T
        worst = max(worst, np.linalg.norm(S - R) / np.linalg.norm(R))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def _tiled_attention(rng, quick):
    worst = 0.0
    sizes = [64, 128] if quick else [64, 128, 256]
    for n in sizes:
        for bc in (16, 64, n):
            Q, K, V = rng.normal(size=(3, n, 64))
            out = tiled_attention_forward(Q, K, V, TileSchedule(64, bc), PrecisionPolicy.exact())
            worst = max(worst, np.max(np.abs(out - reference_attention(Q, K, V))))
    return worst <= 1e-5, f"max abs diff {worst:.2e}"


def _dequant_cost(rng, quick):
    ops = dequant_op_count(16, 4096, 4096)
    return ops == 16_842_752, f"b=16, 4096x4096 -> {ops}"


def _tensorio(rng, quick):
    tensors = {
        "f32": Tensor("fp32", rng.normal(size=(3, 5)).astype(np.float32)),
        "bf": Tensor("bf16", rng.integers(0, 2**16, 7, dtype=np.uint16)),
        "h": Tensor("fp16", rng.integers(0, 2**16, (2, 2), dtype=np.uint16)),
        "e4m3": Tensor("fp8e4m3", np.arange(256, dtype=np.uint8)),
        "i4": Tensor("int4packed", rng.integers(-8, 8, 13).astype(np.int8)),
    }
    buf = encode_package(tensors, {"x": 1}, {"m": "v"})
    back, rec, meta = decode_package(buf)
    ok = all(back[k].same_as(t) for k, t in tensors.items()) and rec == {"x": 1}
    ok = ok and encode_package(back, rec, meta) == buf
    return ok, f"{len(tensors)} tensors, {len(buf)} bytes"


def _merge_neutrality(rng, quick):
    w = BlockWeights.random(rng, 128, 2, 64, 256)
    x = rng.normal(size=(16, 128))
    qb = calibrate_block(w, rng.normal(size=(32, 128)))
    _, rep = forward_quantized(qb, x, PrecisionPolicy.exact(), quantize=False)
    return rep["relative_error"] <= 1e-6, f"relative error {rep['relative_error']:.2e}"


CHECKS = [
    ("fp8 round trip", _fp8_roundtrip),
    ("fp8 monotone", _fp8_monotone),
    ("tiny groups vanish", _underflow_groups),
    ("dequant LUT", _lut),
    ("PTS minimality", _pts_brute),
    ("RPN norm bound", _rpn_bound),
    ("score invariance", _score_invariance),
    ("tiled attention", _tiled_attention),
    ("dequant cost", _dequant_cost),
    ("tensor file", _tensorio),
    ("merge neutrality", _merge_neutrality),
]


def run_selftest(quick: bool = False, seed: int = 0) -> list:
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        try:
            ok, detail = fn(rng, quick)
        except Exception as exc:  # noqa: BLE001 - any crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
