"""Operator-chain workloads: standard FFN, gated FFN, and conv chains lowered to GEMM.

A chain is two back-to-back GEMMs with an optional activation/gating step on
the intermediate:

    standard:  E[m,l] = act(A[m,k] @ B[k,n]) @ D[n,l]
    gated:     E[m,l] = (silu(A @ B0) * (A @ B1)) @ D

Dimension names follow the loop view of the chain: M (shared rows), K (first
reduction), N (intermediate columns / second reduction), L (output columns).
Benchmark presets G1..G10 (standard chains), S1..S8 (gated chains) and
C1..C8 (ResNet conv chains via im2col) ship with the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import InvalidDimension, ProfileError, UnknownPreset, UnsupportedConvChain

DIMS = ("m", "n", "k", "l")
MIN_EXTENT = 16  # one MMA tile per dimension

STANDARD_FFN = "standard_ffn"
GATED_FFN = "gated_ffn"

IDENTITY = "identity"
RELU = "relu"
SILU = "silu"
ACTIVATIONS = (IDENTITY, RELU, SILU)

ROLE_INPUT = "input"
ROLE_INTERMEDIATE = "intermediate"
ROLE_OUTPUT = "output"


@dataclass(frozen=True)
class DimensionSpec:
    m: int
    n: int
    k: int
    l: int
    element_size: int = 2  # bytes per scalar: 2 (f16), 4 (f32), 8 (f64)

    def __post_init__(self):
        for name in DIMS:
            extent = getattr(self, name)
            if extent < MIN_EXTENT:
                raise InvalidDimension(
                    f"dimension {name}={extent} below minimum tile extent {MIN_EXTENT}"
                )
        if self.element_size not in (2, 4, 8):
            raise InvalidDimension(f"element_size must be 2, 4 or 8, got {self.element_size}")

    def size(self, dim: str) -> int:
        return getattr(self, dim)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.m, self.n, self.k, self.l)


@dataclass(frozen=True)
class TensorDecl:
    name: str
    indexing_dims: frozenset
    role: str
    spill_floor: str  # lowest tier the tensor may occupy

    def indexed_by(self, dim: str) -> bool:
        return dim in self.indexing_dims


@dataclass(frozen=True)
class ChainGraph:
    kind: str
    dims: DimensionSpec
    activation: str
    tensors: tuple[TensorDecl, ...]
    # Rows of M that carry real data; the rest is zero padding added when a
    # conv chain's h*w is not a multiple of the MMA tile.
    logical_m: Optional[int] = None

    def __post_init__(self):
        roles = [t.role for t in self.tensors]
        if roles.count(ROLE_INTERMEDIATE) != 1 or roles.count(ROLE_OUTPUT) != 1:
            raise InvalidDimension("chain must have exactly one intermediate and one output")

    def tensor(self, name: str) -> TensorDecl:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def intermediate(self) -> TensorDecl:
        return next(t for t in self.tensors if t.role == ROLE_INTERMEDIATE)

    @property
    def output(self) -> TensorDecl:
        return next(t for t in self.tensors if t.role == ROLE_OUTPUT)

    @property
    def inputs(self) -> tuple[TensorDecl, ...]:
        return tuple(t for t in self.tensors if t.role == ROLE_INPUT)

    @property
    def valid_rows(self) -> int:
        return self.logical_m if self.logical_m is not None else self.dims.m

    def tensor_elements(self, name: str) -> int:
        t = self.tensor(name)
        count = 1
        for dim in DIMS:
            if t.indexed_by(dim):
                count *= self.dims.size(dim)
        return count

    def tensor_bytes(self, name: str) -> int:
        return self.tensor_elements(name) * self.dims.element_size

    def doubled_k_view(self) -> "ChainGraph":
        """Sequential lowering of a gated chain: one standard chain with K doubled.

        The two weight branches stack along K, the branch combine happens at
        reduction completion.  For a standard chain this is the identity.
        """
        if self.kind != GATED_FFN:
            return self
        dims = replace(self.dims, k=2 * self.dims.k)
        return build_standard_ffn(dims, SILU)


def _standard_tensors() -> tuple[TensorDecl, ...]:
    return (
        TensorDecl("A", frozenset({"m", "k"}), ROLE_INPUT, "global"),
        TensorDecl("B", frozenset({"k", "n"}), ROLE_INPUT, "global"),
        TensorDecl("C", frozenset({"m", "n"}), ROLE_INTERMEDIATE, "dsm"),
        TensorDecl("D", frozenset({"n", "l"}), ROLE_INPUT, "global"),
        TensorDecl("E", frozenset({"m", "l"}), ROLE_OUTPUT, "global"),
    )


def _gated_tensors() -> tuple[TensorDecl, ...]:
    return (
        TensorDecl("A", frozenset({"m", "k"}), ROLE_INPUT, "global"),
        TensorDecl("B0", frozenset({"k", "n"}), ROLE_INPUT, "global"),
        TensorDecl("B1", frozenset({"k", "n"}), ROLE_INPUT, "global"),
        TensorDecl("C", frozenset({"m", "n"}), ROLE_INTERMEDIATE, "dsm"),
        TensorDecl("D", frozenset({"n", "l"}), ROLE_INPUT, "global"),
        TensorDecl("E", frozenset({"m", "l"}), ROLE_OUTPUT, "global"),
    )


def build_standard_ffn(dims: DimensionSpec, activation: str = RELU,
                       logical_m: Optional[int] = None) -> ChainGraph:
    if activation not in ACTIVATIONS:
        raise InvalidDimension(f"unknown activation {activation!r}")
    return ChainGraph(STANDARD_FFN, dims, activation, _standard_tensors(), logical_m)


def build_gated_ffn(dims: DimensionSpec) -> ChainGraph:
    """Gated chain; the combine is fixed to silu on branch 0 then elementwise mul."""
    return ChainGraph(GATED_FFN, dims, SILU, _gated_tensors(), None)


@dataclass(frozen=True)
class ConvChainConfig:
    """Two consecutive convs; the second must be pointwise (1x1), stride 1, same padding."""
    ic: int
    h: int
    w: int
    oc1: int
    oc2: int
    k1: int
    k2: int

    def __post_init__(self):
        for name in ("ic", "h", "w", "oc1", "oc2", "k1", "k2"):
            if getattr(self, name) <= 0:
                raise UnsupportedConvChain(f"{name} must be positive")
        if self.k2 != 1:
            raise UnsupportedConvChain("second conv must be pointwise (k2 = 1)")


def _pad_to_tile(extent: int) -> int:
    return MIN_EXTENT * math.ceil(extent / MIN_EXTENT)


def conv_chain_to_gemm(cfg: ConvChainConfig, element_size: int = 2) -> ChainGraph:
    """im2col lowering: m = h*w (zero-padded up to a tile multiple), k = ic*k1^2,
    n = oc1, l = oc2.  Output feature map stays h x w (stride 1, same padding)."""
    logical_m = cfg.h * cfg.w
    m = _pad_to_tile(logical_m)
    dims = DimensionSpec(
        m=m, n=cfg.oc1, k=cfg.ic * cfg.k1 * cfg.k1, l=cfg.oc2, element_size=element_size
    )
    return build_standard_ffn(dims, RELU, logical_m=logical_m if logical_m != m else None)


# --------------------------------------------------------------------------
# Benchmark presets.  G* are standard FFN-style GEMM chains, S* gated FFNs,
# C* ResNet conv chains.  Planning defaults to f16 storage (element_size 2).
# --------------------------------------------------------------------------

_GEMM_CHAIN_PRESETS = {
    "G1": (128, 512, 32, 256),        # DLRM-0
    "G2": (128, 256, 512, 64),        # DLRM-1
    "G3": (128, 512, 416, 256),       # DLRM-2
    "G4": (128, 3072, 768, 768),      # GPT-2-Small
    "G5": (128, 16384, 4096, 4096),   # GPT-6.7B
    "G6": (128, 4096, 1024, 1024),    # GPT2-medium
    "G7": (128, 768, 768, 768),       # nlp_gpt3_base
    "G8": (128, 8192, 2048, 2048),    # OPT-1.3B
    "G9": (128, 2048, 512, 512),      # Performer
    "G10": (128, 1536, 384, 384),     # BERT
}

_GATED_PRESETS = {
    "S1": (128, 8192, 3072, 3072),    # llama-3.2-3B
    "S2": (128, 5632, 2048, 2048),    # llama-1.1B
    "S3": (128, 11008, 4096, 4096),   # Llama-2-7b
    "S4": (128, 8192, 2048, 2048),    # Qwen2.5-2.1B
    "S5": (128, 11008, 2048, 2048),   # Qwen2.5-3B
    "S6": (128, 8960, 1536, 1536),    # Qwen2.5-1.5B
    "S7": (128, 9728, 2560, 2560),    # Qwen3-4B
    "S8": (128, 3072, 1024, 1024),    # Qwen3-0.6B
}

_CONV_PRESETS = {
    "C1": (64, 56, 56, 256, 64, 1, 1),
    "C2": (128, 28, 28, 512, 128, 1, 1),
    "C3": (256, 14, 14, 1024, 256, 1, 1),
    "C4": (512, 7, 7, 2048, 512, 1, 1),
    "C5": (64, 56, 56, 64, 256, 3, 1),
    "C6": (128, 28, 28, 128, 512, 3, 1),
    "C7": (256, 14, 14, 256, 1024, 3, 1),
    "C8": (512, 7, 7, 512, 2048, 3, 1),
}


def preset_ids() -> tuple[str, ...]:
    return tuple(_GEMM_CHAIN_PRESETS) + tuple(_GATED_PRESETS) + tuple(_CONV_PRESETS)


def preset(preset_id: str, element_size: int = 2) -> ChainGraph:
    if preset_id in _GEMM_CHAIN_PRESETS:
        m, n, k, l = _GEMM_CHAIN_PRESETS[preset_id]
        return build_standard_ffn(DimensionSpec(m, n, k, l, element_size), RELU)
    if preset_id in _GATED_PRESETS:
        m, n, k, l = _GATED_PRESETS[preset_id]
        return build_gated_ffn(DimensionSpec(m, n, k, l, element_size))
    if preset_id in _CONV_PRESETS:
        return conv_chain_to_gemm(ConvChainConfig(*_CONV_PRESETS[preset_id]), element_size)
    raise UnknownPreset(f"unknown preset {preset_id!r}; known: {', '.join(preset_ids())}")


def scale_to_desk(graph: ChainGraph, cap: int = 512) -> ChainGraph:
    """Cap every dimension so full tensors fit on a desk machine.

    Extents are already tile multiples, and so is the cap, so divisibility
    survives.  Padding bookkeeping is dropped when the padded rows are cut.
    """
    if cap % MIN_EXTENT:
        raise InvalidDimension(f"cap must be a multiple of {MIN_EXTENT}")
    d = graph.dims
    dims = DimensionSpec(
        min(d.m, cap), min(d.n, cap), min(d.k, cap), min(d.l, cap), d.element_size
    )
    logical = graph.logical_m
    if logical is not None and logical > dims.m:
        logical = None
    if graph.kind == GATED_FFN:
        return build_gated_ffn(dims)
    return build_standard_ffn(dims, graph.activation, logical_m=logical)


# --------------------------------------------------------------------------
# Workload files: same `key = value` grammar as device profiles.
#   kind = standard_ffn | gated_ffn
#   m, n, k, l, element_size, activation (standard chains only)
# --------------------------------------------------------------------------


def parse_workload(text: str) -> ChainGraph:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ProfileError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value

    kind = fields.pop("kind", STANDARD_FFN)
    try:
        dims = DimensionSpec(
            m=int(fields.pop("m")),
            n=int(fields.pop("n")),
            k=int(fields.pop("k")),
            l=int(fields.pop("l")),
            element_size=int(fields.pop("element_size", "2")),
        )
    except KeyError as exc:
        raise ProfileError(f"workload file missing key {exc.args[0]!r}")
    except ValueError as exc:
        raise ProfileError(f"workload file: {exc}")
    activation = fields.pop("activation", RELU).lower()
    if fields:
        raise ProfileError(f"unknown workload keys: {sorted(fields)}")
    if kind == STANDARD_FFN:
        return build_standard_ffn(dims, activation)
    if kind == GATED_FFN:
        return build_gated_ffn(dims)
    raise ProfileError(f"unknown workload kind {kind!r}")


def load_workload(path) -> ChainGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_workload(fh.read())


def serialize_workload(graph: ChainGraph) -> str:
    d = graph.dims
    lines = [
        f"kind = {graph.kind}",
        f"m = {d.m}",
        f"n = {d.n}",
        f"k = {d.k}",
        f"l = {d.l}",
        f"element_size = {d.element_size}",
    ]
    if graph.kind == STANDARD_FFN:
        lines.append(f"activation = {graph.activation}")
    return "\n".join(lines) + "\n"
