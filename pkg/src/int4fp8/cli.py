"""``int4fp8`` command line.

Commands::

    gen        synthetic block weights + calibration/evaluation activations
    calibrate  smoothing recipe (CAS, PTS, RPN, CRS) from a data package
    quantize   quantized package from a data package and a recipe
    run        quantized forward on a data package's inputs; outputs + metrics
    report     underflow fractions, PTS exponents, outlier pairs, dequant cost
    selftest   built-in invariant checks

Settings come from built-in defaults, then ``--config FILE`` (JSON), then
explicit flags.  Exit codes: 0 ok, 1 usage, 2 data error, 3 invariant failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention_sim import PrecisionPolicy
from .gemm_sim import dequant_op_count
from .model_block import (
    CAS_GROUPS,
    LAYERS,
    BlockConfig,
    QuantizedBlock,
    calibrate_recipe,
    forward_quantized,
    merged_weights,
    quantize_block,
)
from .smoothing import apply_cas, underflow_group_fraction
from .synthetic import OutlierSpec, SyntheticConfig, make_fixture
from .tensorio import (
    Tensor,
    TensorFileError,
    quantized_block_from_package,
    quantized_block_to_package,
    read_package,
    read_recipe,
    weights_from_tensors,
    weights_to_tensors,
    write_package,
    write_recipe,
)

log = logging.getLogger("int4fp8")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
METRICS_SCHEMA = "int4fp8.metrics"
METRICS_VERSION = 1
POLICIES = ("mixed", "fp32", "exact")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    model_dim: int = 256
    n_heads: int = 4
    head_dim: int = 64
    ffn_dim: int = 512
    n_tokens: int = 128
    weight_std: float = 1.0
    act_std: float = 1.0
    key_pairs: list = field(default_factory=list)
    key_scale: float = 1.0
    weight_channels: list = field(default_factory=list)
    weight_scale: float = 1.0
    tiny_channels: list = field(default_factory=list)
    tiny_scale: float = 1.0
    act_channels: list = field(default_factory=list)
    act_scale: float = 1.0
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
    cas_modes: dict = field(default_factory=dict)
    policy: str = "mixed"
    p_scale: float = 1.0
    block_rows: int = 64
    block_cols: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(**d)
        cfg.check()
        return cfg

    def check(self):
        if self.policy not in POLICIES:
            raise UsageError(f"policy must be one of {POLICIES}")
        if self.scale_format not in ("fp8", "bf16"):
            raise UsageError("scale_format must be fp8 or bf16")
        bad = set(self.cas_modes) - set(CAS_GROUPS)
        if bad:
            raise UsageError(f"unknown CAS groups {sorted(bad)}; expected {CAS_GROUPS}")

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            self.seed, self.model_dim, self.n_heads, self.head_dim, self.ffn_dim, self.n_tokens,
            self.weight_std, self.act_std,
            OutlierSpec(list(self.key_pairs), self.key_scale, list(self.weight_channels),
                        self.weight_scale, list(self.tiny_channels), self.tiny_scale,
                        act_channels=list(self.act_channels), act_scale=self.act_scale),
        )

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.group_size, self.alpha, self.beta, self.outlier_pairs,
                           self.scale_format, self.rope_base, self.causal, self.use_cas,
                           self.use_pts, self.use_rpn, self.use_crs, dict(self.cas_modes),
                           self.block_rows, self.block_cols)

    def precision_policy(self) -> PrecisionPolicy:
        if self.policy == "exact":
            return PrecisionPolicy.exact()
        if self.policy == "fp32":
            return PrecisionPolicy.fp32()
        return PrecisionPolicy.mixed(p_scale=self.p_scale)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _cas_mode(text):
    group, sep, mode = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected GROUP=MODE")
    try:
        mode = float(mode)
    except ValueError:
        pass
    return group, mode


def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    g = p.add_argument_group("configuration (override --config)")
    g.add_argument("--config", type=Path, default=S, help="JSON file with RunConfig keys")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--model-dim", type=int, default=S)
    g.add_argument("--n-heads", type=int, default=S)
    g.add_argument("--head-dim", type=int, default=S)
    g.add_argument("--ffn-dim", type=int, default=S)
    g.add_argument("--n-tokens", type=int, default=S)
    g.add_argument("--weight-std", type=float, default=S)
    g.add_argument("--act-std", type=float, default=S)
    g.add_argument("--key-pairs", type=_int_list, default=S, help="e.g. 3,11")
    g.add_argument("--key-scale", type=float, default=S)
    g.add_argument("--weight-channels", type=_int_list, default=S)
    g.add_argument("--weight-scale", type=float, default=S)
    g.add_argument("--tiny-channels", type=_int_list, default=S)
    g.add_argument("--tiny-scale", type=float, default=S)
    g.add_argument("--act-channels", type=_int_list, default=S)
    g.add_argument("--act-scale", type=float, default=S)
    g.add_argument("--group-size", type=int, default=S)
    g.add_argument("--alpha", type=float, default=S, help="RPN factor (default 8)")
    g.add_argument("--beta", type=float, default=S, help="CRS factor (default 8)")
    g.add_argument("--outlier-pairs", type=int, default=S, help="CRS pair count (default 8)")
    g.add_argument("--scale-format", choices=("fp8", "bf16"), default=S)
    g.add_argument("--rope-base", type=float, default=S)
    g.add_argument("--causal", action=argparse.BooleanOptionalAction, default=S)
    for name in ("cas", "pts", "rpn", "crs"):
        g.add_argument(f"--use-{name}", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--cas-mode", type=_cas_mode, action="append", default=S,
                   metavar="GROUP=MODE",
                   help=f"groups {', '.join(CAS_GROUPS)}; modes mean-of-absmeans, "
                        "constant-one or a number")
    g.add_argument("--policy", choices=POLICIES, default=S)
    g.add_argument("--p-scale", type=float, default=S)
    g.add_argument("--block-rows", type=int, default=S)
    g.add_argument("--block-cols", type=int, default=S)
    return p


def load_config(args, base: dict | None = None) -> RunConfig:
    """Defaults, then ``base`` (e.g. from a package), then the file, then flags."""
    values = dict(base or {})
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        values.update(doc)
    for f in fields(RunConfig):
        if f.name == "cas_modes":
            if hasattr(args, "cas_mode"):
                values["cas_modes"] = {**values.get("cas_modes", {}), **dict(args.cas_mode)}
        elif hasattr(args, f.name):
            values[f.name] = getattr(args, f.name)
    try:
        return RunConfig.from_dict(values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _dump_json(doc, path):
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _metrics(command: str, **payload) -> dict:
    return {"schema": METRICS_SCHEMA, "schema_version": METRICS_VERSION, "command": command,
            **payload}


def _read_data_package(path):
    tensors, _, meta = read_package(path)
    if meta.get("kind") != "block-data":
        raise TensorFileError(f"{path} is not a data package (kind={meta.get('kind')!r})")
    weights = weights_from_tensors(tensors, int(meta["n_heads"]))
    try:
        calib, inputs = tensors["calib"].values(), tensors["inputs"].values()
    except KeyError as exc:
        raise TensorFileError(f"data package has no tensor {exc}") from None
    return weights, calib, inputs, meta


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_config(args)
    weights, calib, inputs = make_fixture(cfg.synthetic())
    tensors = weights_to_tensors(weights)
    tensors["calib"] = Tensor.from_values(calib, "fp32")
    tensors["inputs"] = Tensor.from_values(inputs, "fp32")
    meta = {"kind": "block-data", "n_heads": cfg.n_heads, "config": asdict(cfg)}
    write_package(tensors, None, args.out, meta)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    weights, calib, _, meta = _read_data_package(args.package)
    cfg = load_config(args, meta.get("config"))
    recipe = calibrate_recipe(weights, calib, cfg.block_config())
    write_recipe(recipe, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_quantize(args) -> int:
    weights, _, _, _ = _read_data_package(args.package)
    recipe = read_recipe(args.recipe)
    qb = quantize_block(weights, recipe)
    tensors, recipes, meta = quantized_block_to_package(qb)
    write_package(tensors, recipes, args.out, meta)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _load_qblock(path) -> QuantizedBlock:
    tensors, recipes, meta = read_package(path)
    return quantized_block_from_package(tensors, recipes, meta)


def cmd_run(args) -> int:
    qb = _load_qblock(args.qpackage)
    weights, _, inputs, meta = _read_data_package(args.inputs)
    cfg = load_config(args, meta.get("config"))
    passthrough = args.passthrough if args.passthrough is not None else cfg.policy == "exact"
    qb.source = qb.source or weights
    if passthrough and qb.prepared is None:
        raise TensorFileError("passthrough needs source weights in the quantized package")
    out, report = forward_quantized(qb, inputs, cfg.precision_policy(), quantize=not passthrough,
                                    reference=weights)
    if args.out is not None:
        write_package({"output": Tensor.from_values(out, "fp32")}, None, args.out,
                      {"kind": "block-output", "policy": cfg.policy})
    _dump_json(_metrics("run", policy=cfg.policy, quantized=not passthrough,
                        n_tokens=int(inputs.shape[0]), **{k: v for k, v in report.items()
                                                          if k != "quantized"}),
               args.metrics)
    return EXIT_OK


def layer_report(weights, recipe, qweights=None, batch: int = 16) -> dict:
    """Per-layer report rows; recomputable from source weights and recipe."""
    W = merged_weights(weights, recipe)
    g = recipe.config.group_size
    rows = {}
    for name in LAYERS:
        r = recipe.layers[name]
        cas_w = apply_cas(W[name], r.cas)
        raw = weights.as_dict()[name]
        d_out, d_in = raw.shape
        row = {
            "shape": [d_out, d_in],
            "underflow_fraction": {
                "raw": underflow_group_fraction(raw, g),
                "cas": underflow_group_fraction(cas_w, g),
                "cas_pts": underflow_group_fraction(r.prepare_weight(W[name]), g),
            },
            "cas_mode": r.cas.mode,
            "pts_exponent": int(r.pts.exponent),
            "pts_stop_reason": r.pts.stop_reason,
            "dequant_ops": dequant_op_count(batch, d_in, d_out),
        }
        if qweights is not None:
            row["zero_scale_fraction"] = float(np.mean(qweights[name].scale_values() == 0))
        rows[name] = row
    return rows


def cmd_report(args) -> int:
    tensors, recipes, meta = read_package(args.package)
    kind = meta.get("kind")
    if kind == "quantized-block":
        qb = quantized_block_from_package(tensors, recipes, meta)
        if qb.source is None:
            raise TensorFileError("quantized package carries no source weights")
        recipe, weights, qweights = qb.recipe(), qb.source, qb.qweights
    elif kind == "block-data":
        weights, calib, _, meta = _read_data_package(args.package)
        cfg = load_config(args, meta.get("config"))
        recipe = calibrate_recipe(weights, calib, cfg.block_config())
        qweights = None
    else:
        raise TensorFileError(f"cannot report on package kind {kind!r}")
    layers = layer_report(weights, recipe, qweights, args.batch)
    extra = [{"d_in": a, "d_out": b, "dequant_ops": dequant_op_count(args.batch, a, b)}
             for a, b in (args.linear or [])]
    doc = _metrics(
        "report",
        package_kind=kind,
        group_size=recipe.config.group_size,
        layers=layers,
        outlier_pairs=[list(c.outlier_pairs) for c in recipe.crs],
        alpha=recipe.config.alpha,
        beta=recipe.config.beta,
        dequant_cost={"batch": args.batch,
                      "total_ops": sum(r["dequant_ops"] for r in layers.values()),
                      "extra": extra},
    )
    if args.csv is not None:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "raw", "cas", "cas_pts", "pts_exponent", "dequant_ops"])
            for name, r in layers.items():
                u = r["underflow_fraction"]
                w.writerow([name, u["raw"], u["cas"], u["cas_pts"], r["pts_exponent"],
                            r["dequant_ops"]])
    _dump_json(doc, args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(quick=args.quick)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_INVARIANT if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    p = _Parser(prog="int4fp8", description="INT4/FP8 quantization laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic data package")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("calibrate", parents=[common], help="compute a smoothing recipe")
    s.add_argument("package", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("quantize", help="quantize a data package with a recipe")
    s.add_argument("package", type=Path)
    s.add_argument("recipe", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("run", parents=[common], help="run the quantized block")
    s.add_argument("qpackage", type=Path)
    s.add_argument("--inputs", type=Path, required=True, help="data package (inputs + reference)")
    s.add_argument("--out", type=Path, help="output tensor file")
    s.add_argument("--metrics", type=Path, help="metrics JSON (default stdout)")
    s.add_argument("--passthrough", action=argparse.BooleanOptionalAction, default=None,
                   help="skip quantization (default: only with --policy exact)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", parents=[common], help="underflow / cost report")
    s.add_argument("package", type=Path, help="data package or quantized package")
    s.add_argument("--batch", type=int, default=16, help="batch size for dequant cost")
    s.add_argument("--linear", type=int, nargs=2, action="append", metavar=("D_IN", "D_OUT"),
                   help="extra layer shape for the cost estimate")
    s.add_argument("--out", type=Path, help="JSON output (default stdout)")
    s.add_argument("--csv", type=Path, help="also write per-layer rows as CSV")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--quick", action="store_true", help="smaller randomized suites")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"int4fp8: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TensorFileError, ValueError, OSError) as exc:
        print(f"int4fp8: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
