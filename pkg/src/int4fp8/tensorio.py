"""Single-file tensor container and smoothing-recipe documents.

Layout of a tensor file::

    b"I4F8TNSR"            8-byte magic
    uint32 little-endian   header length H
    H bytes                UTF-8 JSON header
    zero padding           up to the next multiple of 64
    payload                tensors at 64-byte aligned offsets (relative to
                           the payload start), little-endian, no compression

Header::

    {"version": 1,
     "tensors": [{"name", "dtype", "shape", "offset", "length"}, ...],
     "recipes": {...} | null,
     "metadata": {...}}

Tensors hold raw codes, never decoded floats: ``fp32`` as ``float32``,
``bf16``/``fp16`` as ``uint16`` bit patterns, ``fp8e4m3`` as ``uint8`` codes
and ``int4packed`` as signed ``int8`` codes packed two per byte, low nibble
first (the layout of :func:`int4fp8.numerics.pack_int4`).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import bf16_decode, bf16_encode, fp8_decode, fp8_encode, fp16_decode, fp16_encode
from .numerics import pack_int4, unpack_int4

MAGIC = b"I4F8TNSR"
FORMAT_VERSION = 1
RECIPE_VERSION = 1
ALIGNMENT = 64

# dtype -> (numpy container, bytes for n elements)
DTYPES = {
    "fp32": (np.dtype("<f4"), lambda n: 4 * n),
    "bf16": (np.dtype("<u2"), lambda n: 2 * n),
    "fp16": (np.dtype("<u2"), lambda n: 2 * n),
    "fp8e4m3": (np.dtype("u1"), lambda n: n),
    "int4packed": (np.dtype("i1"), lambda n: (n + 1) // 2),
}


class TensorFileError(ValueError):
    """Base class for container errors."""


class MalformedHeaderError(TensorFileError):
    pass


class OverlappingRegionsError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


def _align(n: int) -> int:
    return -(-n // ALIGNMENT) * ALIGNMENT


@dataclass
class Tensor:
    """A named array of raw codes in one of the container dtypes."""

    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise UnknownDtypeError(f"unknown dtype {self.dtype!r}")
        container = DTYPES[self.dtype][0]
        data = np.asarray(self.data)
        if self.dtype == "int4packed":
            if data.size and (data.min() < -8 or data.max() > 7):
                raise ValueError("int4 codes must lie in [-8, 7]")
        elif data.dtype.kind == "f" and self.dtype != "fp32":
            raise TypeError(f"{self.dtype} tensors hold codes; use Tensor.from_values")
        self.data = np.ascontiguousarray(data.astype(container, copy=False))

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @classmethod
    def from_values(cls, values, dtype: str) -> "Tensor":
        """Encode real values (nearest-even) into ``dtype`` codes."""
        values = np.asarray(values, dtype=np.float64)
        enc = {
            "fp32": lambda v: v.astype(np.float32),
            "bf16": bf16_encode,
            "fp16": fp16_encode,
            "fp8e4m3": fp8_encode,
            "int4packed": lambda v: np.clip(np.rint(v), -8, 7).astype(np.int8),
        }
        if dtype not in enc:
            raise UnknownDtypeError(f"unknown dtype {dtype!r}")
        return cls(dtype, np.asarray(enc[dtype](values)).reshape(values.shape))

    def values(self) -> np.ndarray:
        dec = {
            "fp32": lambda c: c.astype(np.float64),
            "bf16": bf16_decode,
            "fp16": fp16_decode,
            "fp8e4m3": fp8_decode,
            "int4packed": lambda c: c.astype(np.float64),
        }
        return np.asarray(dec[self.dtype](self.data), dtype=np.float64).reshape(self.shape)

    def to_bytes(self) -> bytes:
        if self.dtype == "int4packed":
            return pack_int4(self.data).tobytes()
        return self.data.tobytes()

    @classmethod
    def from_bytes(cls, dtype: str, shape, raw: bytes) -> "Tensor":
        if dtype not in DTYPES:
            raise UnknownDtypeError(f"unknown dtype {dtype!r}")
        container, nbytes = DTYPES[dtype]
        n = math.prod(shape)
        if len(raw) != nbytes(n):
            raise TruncatedPayloadError(f"{dtype} tensor of {n} elements needs "
                                        f"{nbytes(n)} bytes, got {len(raw)}")
        if dtype == "int4packed":
            data = unpack_int4(np.frombuffer(raw, dtype=np.uint8), n)
        else:
            data = np.frombuffer(raw, dtype=container).copy()
        return cls(dtype, data.reshape(shape))

    def same_as(self, other: "Tensor") -> bool:
        return (self.dtype == other.dtype and self.shape == other.shape
                and self.to_bytes() == other.to_bytes())


def encode_package(tensors: dict, recipes: dict | None = None, metadata: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        if not isinstance(t, Tensor):
            raise TypeError(f"tensor {name!r} is not a Tensor")
        raw = t.to_bytes()
        entries.append({"name": name, "dtype": t.dtype, "shape": list(t.shape),
                        "offset": offset, "length": len(raw)})
        blobs.append(raw + b"\0" * (_align(len(raw)) - len(raw)))
        offset += _align(len(raw))
    header = {"version": FORMAT_VERSION, "tensors": entries, "recipes": recipes,
              "metadata": metadata or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = MAGIC + struct.pack("<I", len(hbytes)) + hbytes
    prefix += b"\0" * (_align(len(prefix)) - len(prefix))
    return prefix + b"".join(blobs)


def _parse_header(buf: bytes):
    if len(buf) < len(MAGIC) + 4 or buf[:len(MAGIC)] != MAGIC:
        raise MalformedHeaderError("missing magic bytes")
    (hlen,) = struct.unpack_from("<I", buf, len(MAGIC))
    start = len(MAGIC) + 4
    if start + hlen > len(buf):
        raise MalformedHeaderError("header runs past end of file")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise MalformedHeaderError("header must be an object with a 'tensors' list")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {header.get('version')!r}, "
                                   f"reader supports {FORMAT_VERSION}")
    return header, _align(start + hlen)


def _check_entry(e):
    try:
        name, dtype = e["name"], e["dtype"]
        shape = [int(s) for s in e["shape"]]
        offset, length = int(e["offset"]), int(e["length"])
    except (KeyError, TypeError, ValueError):
        raise MalformedHeaderError(f"bad tensor entry {e!r}") from None
    if not isinstance(name, str) or any(s < 0 for s in shape) or offset < 0 or length < 0:
        raise MalformedHeaderError(f"bad tensor entry {e!r}")
    if dtype not in DTYPES:
        raise UnknownDtypeError(f"tensor {name!r}: unknown dtype {dtype!r}")
    if length != DTYPES[dtype][1](math.prod(shape)):
        raise MalformedHeaderError(f"tensor {name!r}: length {length} does not match "
                                   f"shape {shape} as {dtype}")
    return name, dtype, tuple(shape), offset, length


def decode_package(buf: bytes):
    """Inverse of :func:`encode_package`: ``(tensors, recipes, metadata)``."""
    header, base = _parse_header(buf)
    payload = len(buf) - base
    regions, tensors = [], {}
    for e in header["tensors"]:
        name, dtype, shape, offset, length = _check_entry(e)
        if name in tensors:
            raise MalformedHeaderError(f"duplicate tensor name {name!r}")
        if offset + length > payload:
            raise TruncatedPayloadError(f"tensor {name!r} ends at {offset + length}, "
                                        f"payload has {max(payload, 0)} bytes")
        regions.append((offset, offset + length, name))
        tensors[name] = Tensor.from_bytes(dtype, shape,
                                          buf[base + offset:base + offset + length])
    regions.sort()
    end, owner = 0, None
    for start, stop, name in regions:
        if stop == start:
            continue
        if start < end:
            raise OverlappingRegionsError(f"tensors {owner!r} and {name!r} overlap")
        if stop > end:
            end, owner = stop, name
    return tensors, header.get("recipes"), header.get("metadata") or {}


def write_package(tensors: dict, recipes: dict | None, path, metadata: dict | None = None):
    Path(path).write_bytes(encode_package(tensors, recipes, metadata))


def read_package(path):
    """Returns ``(tensors, recipes, metadata)``."""
    return decode_package(Path(path).read_bytes())


# -- recipe documents -------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _array(doc, key, length, what):
    try:
        arr = np.asarray(doc[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError):
        raise MalformedHeaderError(f"{what}: missing or non-numeric {key!r}") from None
    if arr.ndim != 1 or arr.size != length:
        raise MalformedHeaderError(f"{what}: {key!r} has {arr.size} entries, expected {length}")
    return arr


def recipe_to_doc(recipe) -> dict:
    """JSON-ready form of a :class:`~int4fp8.model_block.BlockRecipe`."""
    from .model_block import LAYERS

    layers = {}
    for name in LAYERS:
        r = recipe.layers[name]
        layers[name] = {
            "n_in": int(r.cas.lambdas.size),
            "cas": {"mode": r.cas.mode, "target_absmean": float(r.cas.target_absmean),
                    "lambdas": _floats(r.cas.lambdas)},
            "pts": {"exponent": int(r.pts.exponent), "stop_reason": r.pts.stop_reason,
                    "score_trace": _floats(r.pts.score_trace)},
        }
    heads = [{"rpn_s": _floats(rpn.s), "crs_t": _floats(crs.t),
              "outlier_pairs": [int(p) for p in crs.outlier_pairs]}
             for rpn, crs in zip(recipe.rpn, recipe.crs)]
    return {
        "version": RECIPE_VERSION,
        "config": recipe.config.to_dict(),
        "dims": {"model_dim": recipe.model_dim, "n_heads": recipe.n_heads,
                 "head_dim": recipe.head_dim, "ffn_dim": recipe.ffn_dim},
        "rope": {"head_dim": recipe.head_dim, "base": float(recipe.config.rope_base)},
        "alpha": float(recipe.config.alpha),
        "beta": float(recipe.config.beta),
        "input_cas": {"mode": recipe.input_cas.mode,
                      "target_absmean": float(recipe.input_cas.target_absmean),
                      "lambdas": _floats(recipe.input_cas.lambdas)},
        "layers": layers,
        "heads": heads,
    }


def recipe_from_doc(doc: dict):
    """Validate and rebuild a :class:`~int4fp8.model_block.BlockRecipe`."""
    from .model_block import LAYERS, BlockConfig, BlockRecipe
    from .rope_calib import CrsScales, RpnScales
    from .smoothing import CasScales, PtsResult, SmoothingRecipe

    if not isinstance(doc, dict):
        raise MalformedHeaderError("recipe document must be an object")
    if doc.get("version") != RECIPE_VERSION:
        raise VersionMismatchError(f"recipe version {doc.get('version')!r}, "
                                   f"reader supports {RECIPE_VERSION}")
    try:
        dims = {k: int(doc["dims"][k]) for k in ("model_dim", "n_heads", "head_dim", "ffn_dim")}
        config = BlockConfig.from_dict(doc["config"])
        layer_docs = doc["layers"]
        head_docs = doc["heads"]
        alpha, beta = float(doc["alpha"]), float(doc["beta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"recipe document incomplete: {exc}") from None
    inner = dims["n_heads"] * dims["head_dim"]
    n_in = {"q": dims["model_dim"], "k": dims["model_dim"], "v": dims["model_dim"],
            "o": inner, "up": dims["model_dim"], "gate": dims["model_dim"],
            "down": dims["ffn_dim"]}

    def cas_of(d, length, what):
        try:
            return CasScales(_array(d, "lambdas", length, what), float(d["target_absmean"]),
                             d["mode"])
        except KeyError as exc:
            raise MalformedHeaderError(f"{what}: missing {exc}") from None

    layers = {}
    for name in LAYERS:
        if name not in layer_docs:
            raise MalformedHeaderError(f"recipe has no layer {name!r}")
        ld = layer_docs[name]
        if int(ld.get("n_in", -1)) != n_in[name]:
            raise MalformedHeaderError(f"layer {name!r}: declared n_in {ld.get('n_in')} "
                                       f"!= {n_in[name]}")
        p = ld["pts"]
        pts = PtsResult(int(p["exponent"]), p["stop_reason"], _floats(p["score_trace"]))
        layers[name] = SmoothingRecipe(cas_of(ld["cas"], n_in[name], f"layer {name}"), pts,
                                       layer=name)
    if len(head_docs) != dims["n_heads"]:
        raise MalformedHeaderError(f"{len(head_docs)} head entries for {dims['n_heads']} heads")
    rpn, crs = [], []
    half = dims["head_dim"] // 2
    for i, h in enumerate(head_docs):
        rpn.append(RpnScales(_array(h, "rpn_s", half, f"head {i}"), alpha))
        pairs = [int(p) for p in h.get("outlier_pairs", [])]
        if any(not 0 <= p < half for p in pairs):
            raise MalformedHeaderError(f"head {i}: outlier pair index out of range")
        crs.append(CrsScales(_array(h, "crs_t", dims["head_dim"], f"head {i}"), pairs, beta))
    input_cas = cas_of(doc["input_cas"], dims["model_dim"], "input_cas")
    layers["k"].rpn, layers["k"].crs = rpn, crs
    return BlockRecipe(config=config, layers=layers, input_cas=input_cas, rpn=rpn, crs=crs,
                       **dims)


def write_recipe(recipe, path):
    Path(path).write_text(json.dumps(recipe_to_doc(recipe), indent=1, sort_keys=True) + "\n")


def read_recipe(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"recipe file is not valid JSON: {exc}") from None
    return recipe_from_doc(doc)


# -- block packages ---------------------------------------------------------

def weights_to_tensors(weights, prefix: str = "") -> dict:
    return {f"{prefix}W_{k}": Tensor.from_values(v, "fp32") for k, v in weights.as_dict().items()}


def weights_from_tensors(tensors: dict, n_heads: int, prefix: str = ""):
    from .model_block import LAYERS, BlockWeights

    try:
        mats = {k: tensors[f"{prefix}W_{k}"].values() for k in LAYERS}
    except KeyError as exc:
        raise MalformedHeaderError(f"package has no tensor {exc}") from None
    return BlockWeights.from_dict(mats, n_heads)


def quantized_block_to_package(qb) -> tuple:
    """``(tensors, recipes, metadata)`` for a :class:`QuantizedBlock`."""
    tensors = {}
    scale_dtype = "fp8e4m3" if qb.config.scale_format == "fp8" else "bf16"
    for name, qw in qb.qweights.items():
        tensors[f"{name}.codes"] = Tensor("int4packed", qw.codes)
        tensors[f"{name}.scales"] = Tensor(scale_dtype, qw.scales)
    if qb.source is not None:
        tensors.update(weights_to_tensors(qb.source, "source."))
    metadata = {"kind": "quantized-block", "n_heads": qb.n_heads}
    return tensors, recipe_to_doc(qb.recipe()), metadata


def quantized_block_from_package(tensors: dict, recipes: dict, metadata: dict):
    from .model_block import QuantizedBlock
    from .quantizer import QuantizedWeight

    if metadata.get("kind") != "quantized-block" or recipes is None:
        raise MalformedHeaderError("not a quantized-block package")
    recipe = recipe_from_doc(recipes)
    qweights = {}
    for name, r in recipe.layers.items():
        try:
            codes, scales = tensors[f"{name}.codes"], tensors[f"{name}.scales"]
        except KeyError as exc:
            raise MalformedHeaderError(f"package has no tensor {exc}") from None
        qweights[name] = QuantizedWeight(codes.data.astype(np.int8), scales.data,
                                         recipe.config.group_size, r.pts.exponent,
                                         recipe.config.scale_format, r)
    source = None
    if "source.W_q" in tensors:
        source = weights_from_tensors(tensors, recipe.n_heads, "source.")
    return QuantizedBlock.from_recipe(recipe, qweights, source=source)
