"""Tile-level execution of a fusion plan on real matrices.

The simulator replays the loop nest a plan describes: spatial dimensions
become a grid of clusters, temporal dimensions iterate inside, blocks
cooperate through the exchange / shuffle / scatter-reduce primitives, and
every byte crossing a tier boundary increments a counter.  It shares the
plan geometry and the resource mapping with the analyzer but derives all
event counts from the replay itself, so comparing its counters against the
analyzer's closed forms is a genuine cross-check, not an identity.

Numerics: inputs are uniform in [-1, 1] from a seeded generator, tiles
accumulate in a fixed order (ascending reduction trips, ascending block
index), so a (plan, seed, dtype) triple reproduces bit-identical results.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import prod
from typing import Optional

import numpy as np

from .analyzer import (
    DEFAULT_ACC_SIZE,
    analyze,
    live_tile_counts,
    slot_tier_bytes,
)
from .errors import PlanError
from .hardware import DeviceModel, default_h100
from .plan import (
    LOWERING_DOUBLED_K,
    LOWERING_SPATIAL_SPLIT,
    FusionPlan,
    plan_geometry,
    structural_violations,
)
from .workload import DIMS, GATED_FFN, IDENTITY, RELU, SILU, ChainGraph

DEFAULT_WORKSPACE_BYTES = 1 << 30  # refuse plans whose full tensors exceed this


@dataclass(frozen=True)
class SimConfig:
    dtype: str = "f64"  # f32 | f64
    seed: int = 0
    tolerance: Optional[float] = None  # default depends on dtype
    enforce_rules: bool = True
    acc_size: int = DEFAULT_ACC_SIZE
    max_workspace_bytes: int = DEFAULT_WORKSPACE_BYTES

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def effective_tolerance(self) -> float:
        if self.tolerance is not None:
            return self.tolerance
        return 1e-10 if self.dtype == "f64" else 1e-4


@dataclass
class TrafficTrace:
    tier_bytes: dict = field(default_factory=lambda: {t: 0 for t in
                                                      ("reg", "smem", "dsm", "l2", "global")})
    primitives: dict = field(default_factory=lambda: {
        "all_exchange": 0, "shuffle": 0, "reduce_scatter": 0, "inter_cluster_reduce": 0})
    per_tensor: dict = field(default_factory=dict)

    def add_load(self, tensor: str, nbytes: int) -> None:
        self.tier_bytes["global"] += nbytes
        self.tier_bytes["smem"] += nbytes  # loads land in shared memory once
        slot = self.per_tensor.setdefault(tensor, {})
        slot["loads"] = slot.get("loads", 0) + nbytes

    def add_store(self, tensor: str, nbytes: int) -> None:
        self.tier_bytes["global"] += nbytes
        slot = self.per_tensor.setdefault(tensor, {})
        slot["stores"] = slot.get("stores", 0) + nbytes

    def add_primitive(self, name: str, nbytes: int) -> None:
        if nbytes:
            self.primitives[name] += nbytes
            self.tier_bytes["dsm"] += nbytes

    def charge_region(self, split: dict, copies: int, touches: int = 1) -> None:
        for tier, nbytes in split.items():
            target = "global" if tier == "l2" else tier
            self.tier_bytes[target] += nbytes * copies * touches

    def to_dict(self) -> dict:
        return {
            "tier_bytes": {k: int(v) for k, v in self.tier_bytes.items()},
            "primitives_bytes": {k: int(v) for k, v in sorted(self.primitives.items())},
            "per_tensor": {k: dict(v) for k, v in sorted(self.per_tensor.items())},
        }


def _act(name: str, x):
    if name == IDENTITY:
        return x
    if name == RELU:
        return np.maximum(x, 0)
    if name == SILU:
        return x / (1.0 + np.exp(-x))
    raise PlanError(f"unknown activation {name!r}")


def make_inputs(graph: ChainGraph, config: SimConfig) -> dict:
    rng = np.random.default_rng(config.seed)
    d = graph.dims
    dt = config.np_dtype
    shapes = {"A": (d.m, d.k), "D": (d.n, d.l)}
    if graph.kind == GATED_FFN:
        shapes["B0"] = (d.k, d.n)
        shapes["B1"] = (d.k, d.n)
    else:
        shapes["B"] = (d.k, d.n)
    return {name: rng.uniform(-1.0, 1.0, shape).astype(dt)
            for name, shape in sorted(shapes.items())}


def oracle(graph: ChainGraph, inputs: dict):
    """Reference output by straightforward dense matmul, no tiling."""
    a = inputs["A"]
    d = inputs["D"]
    if graph.kind == GATED_FFN:
        c = _act(SILU, a @ inputs["B0"]) * (a @ inputs["B1"])
    else:
        c = _act(graph.activation, a @ inputs["B"])
    return c @ d


def fits_execution_budget(graph: ChainGraph,
                          budget: int = DEFAULT_WORKSPACE_BYTES) -> bool:
    total = sum(graph.tensor_elements(t.name) for t in graph.tensors) * 8
    return 2 * total <= budget


def max_relative_error(result, reference) -> float:
    scale = float(np.max(np.abs(reference)))
    if scale == 0.0:
        return float(np.max(np.abs(result)))
    return float(np.max(np.abs(result - reference)) / scale)


# ---------------------------------------------------------------------------
# Plan execution.
# ---------------------------------------------------------------------------


class _TensorCache:
    """Residency of a streamed input: reload whenever any loop at or outside
    the tensor's innermost indexing level advances (tracked as the loop-index
    prefix over the phase's dimensions)."""

    def __init__(self, order, levels, index_dims, phase_dims, completion: bool):
        depth = max((levels[d] for d in index_dims if d in levels), default=0)
        allowed = set(DIMS) if not completion else phase_dims
        self.positions = [
            i for i, dim in enumerate(order)
            if levels[dim] <= depth and dim in allowed
        ]
        self.last = None

    def misses(self, leaf) -> bool:
        key = tuple(leaf[i] for i in self.positions)
        if key != self.last:
            self.last = key
            return True
        return False


def execute_plan(plan: FusionPlan, graph: ChainGraph, inputs: dict,
                 config: SimConfig = SimConfig(),
                 device: Optional[DeviceModel] = None):
    """Replay the plan on real inputs; returns (output matrix, TrafficTrace).

    Raises PlanError for structural problems or when full tensors exceed the
    workspace budget; CapacityExceeded propagates from the resource mapping
    exactly as the analyzer reports it.
    """
    device = device or default_h100()
    problems = structural_violations(plan, graph, device)
    if problems:
        raise PlanError("; ".join(problems))
    if config.enforce_rules:
        from .search import rule3_activation, rule4_dependency

        if not rule4_dependency(plan.schedule):
            raise PlanError("output-column dimension is grid-spatial")
        if not rule3_activation(plan.schedule, graph, plan.tiles.cluster,
                                plan.tiles.block, plan.gated_lowering):
            raise PlanError("combine would consume incomplete reduction sums")
    if not fits_execution_budget(graph, config.max_workspace_bytes):
        raise PlanError(
            "full tensors exceed the execution workspace budget; "
            "use analyzer-only mode for this size"
        )

    analysis = analyze(graph, device, plan, config.acc_size)
    geom = plan_geometry(graph, plan)
    sched = plan.schedule
    order = sched.temporal_order
    levels = geom.levels
    cl = geom.cluster
    dt = config.np_dtype
    elt = graph.dims.element_size
    acc = config.acc_size
    blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}
    blocks = geom.blocks
    gated = graph.kind == GATED_FFN
    lowering = plan.gated_lowering
    completion = geom.completion_mode

    f_a = blk["m"] * blk["k"] * elt
    f_b = blk["k"] * blk["n"] * elt
    f_d = blk["n"] * blk["l"] * elt
    f_c_acc = blk["m"] * blk["n"] * acc
    f_e_acc = blk["m"] * blk["l"] * acc
    exchange_payload = f_c_acc
    if lowering == LOWERING_DOUBLED_K and cl.cls_k > 1:
        exchange_payload = 2 * f_c_acc  # both branch accumulators travel
    g1 = cl.cls_shuffle

    live = live_tile_counts(graph, plan, geom)
    c_slots = slot_tier_bytes(analysis.mapping["C"],
                              live["C"]["m"] * live["C"]["n"], f_c_acc)
    e_slots = slot_tier_bytes(analysis.mapping["E"],
                              live["E"]["m"] * live["E"]["l"], f_e_acc)

    def c_slot(tm, tn):
        return (tm % live["C"]["m"]) * live["C"]["n"] + (tn % live["C"]["n"])

    def e_slot(tm, tl):
        return (tm % live["E"]["m"]) * live["E"]["l"] + (tl % live["E"]["l"])

    trace = TrafficTrace()
    d_sizes = graph.dims
    e_out = np.zeros((d_sizes.m, d_sizes.l), dtype=dt)
    a_mat = inputs["A"]
    d_mat = inputs["D"]

    def stacked_segments(k0, width):
        """Split a virtual reduction range [k0, k0+width) at the branch seam.

        Yields (branch, offset, take): offset indexes both the weight rows
        and the A columns (the A operand repeats across the two branches).
        """
        kdim = d_sizes.k
        if k0 < kdim:
            yield 0, k0, min(width, kdim - k0)
        if k0 + width > kdim:
            lo = max(k0, kdim) - kdim
            yield 1, lo, k0 + width - max(k0, kdim)

    temporal = [d for d in order]
    trip_ranges = [range(geom.trips[d]) for d in temporal]
    pos = {d: i for i, d in enumerate(temporal)}

    def trip(leaf, dim):
        return leaf[pos[dim]] if dim in pos else 0

    needed_consumptions = geom.trips["n"] * (1 if completion else geom.trips["k"])

    grid_dims = [d for d in DIMS if d in sched.spatial]
    grid_ranges = [range(geom.grid[d]) for d in grid_dims]

    k_trips = geom.trips["k"]
    split_k = geom.split["k"]
    half_k = cl.cls_k // 2 if lowering == LOWERING_SPATIAL_SPLIT else None

    for grid_pos in itertools.product(*grid_ranges):
        gcoord = dict(zip(grid_dims, grid_pos))
        base = {d: gcoord.get(d, 0) * geom.cover[d] for d in DIMS}

        cache_a = _TensorCache(order, levels, ("m", "k"), {"m", "n", "k"}, completion)
        cache_b = _TensorCache(order, levels, ("k", "n"), {"m", "n", "k"}, completion)
        cache_d = _TensorCache(order, levels, ("n", "l"), {"m", "n", "l"}, completion)

        gemm0_done: set = set()
        gemm1_done: set = set()
        c_complete: dict = {}
        partials: dict = {}
        e_accum: dict = {}
        consumed: dict = {}
        last_inc_prefix = [None]
        inc_levels = [i for i, d in enumerate(temporal)
                      if levels[d] <= max((levels[x] for x in ("m", "n", "k")
                                           if x in levels), default=0)]
        gemm1_levels = [i for i, d in enumerate(temporal)
                        if levels[d] <= max((levels[x] for x in ("m", "n", "l")
                                             if x in levels), default=0)]
        last_gemm1_prefix = [None]

        def offsets(dim, leaf):
            return base[dim] + trip(leaf, dim) * geom.cover[dim]

        def run_gemm0(leaf):
            """One reduction batch over the cluster's current region."""
            m0, n0, k0 = offsets("m", leaf), offsets("n", leaf), offsets("k", leaf)
            mr = slice(m0, m0 + geom.cover["m"])
            nr = slice(n0, n0 + geom.cover["n"])
            if cache_a.misses(leaf):
                trace.add_load("A", blocks * f_a)
            if cache_b.misses(leaf):
                if gated and lowering == LOWERING_SPATIAL_SPLIT:
                    trace.add_load("B0", (blocks // 2) * f_b)
                    trace.add_load("B1", (blocks // 2) * f_b)
                elif gated:
                    trace.add_load("_Bstream", blocks * f_b)
                else:
                    trace.add_load("B", blocks * f_b)
            shape = (geom.cover["m"], geom.cover["n"])
            acc0 = np.zeros(shape, dtype=dt)
            acc1 = np.zeros(shape, dtype=dt) if gated else None
            if gated and lowering == LOWERING_SPATIAL_SPLIT:
                for j in range(half_k):
                    ks = k0 + j * blk["k"]
                    a_sl = a_mat[mr, ks:ks + blk["k"]]
                    acc0 += a_sl @ inputs["B0"][ks:ks + blk["k"], nr]
                    acc1 += a_sl @ inputs["B1"][ks:ks + blk["k"], nr]
            elif gated:  # stacked branches along the virtual doubled reduction
                for j in range(split_k):
                    ks = k0 + j * blk["k"]
                    for branch, off, take in stacked_segments(ks, blk["k"]):
                        w = inputs["B0"] if branch == 0 else inputs["B1"]
                        part = a_mat[mr, off:off + take] @ w[off:off + take, nr]
                        if branch == 0:
                            acc0 += part
                        else:
                            acc1 += part
            else:
                for j in range(split_k):
                    ks = k0 + j * blk["k"]
                    acc0 += a_mat[mr, ks:ks + blk["k"]] @ inputs["B"][ks:ks + blk["k"], nr]
            return acc0, acc1

        def combine(acc0, acc1):
            if gated:
                return _act(SILU, acc0) * acc1
            return _act(graph.activation, acc0)

        def fire_gemm1(region, leaf):
            tm, tn, tl = trip(leaf, "m"), trip(leaf, "n"), trip(leaf, "l")
            trace.add_primitive("shuffle", blocks * (g1 - 1) * f_c_acc)
            if cache_d.misses(leaf):
                trace.add_load("D", blocks * g1 * f_d)
            if completion:
                trace.charge_region(c_slots[c_slot(tm, tn)], blocks)  # read own tile
            trace.charge_region(e_slots[e_slot(tm, tl)], blocks, touches=2)  # RMW
            n0, l0 = offsets("n", leaf), offsets("l", leaf)
            contrib = region @ d_mat[n0:n0 + geom.cover["n"], l0:l0 + geom.cover["l"]]
            key = (tm, tl)
            if key in e_accum:
                e_accum[key] = e_accum[key] + contrib
            else:
                e_accum[key] = contrib
            consumed[key] = consumed.get(key, 0) + 1
            if consumed[key] == needed_consumptions:
                trace.add_primitive(
                    "reduce_scatter",
                    cl.cls_m * cl.cls_l * (cl.cls_reduce - 1) * f_e_acc,
                )
                trace.charge_region(e_slots[e_slot(tm, tl)], blocks)  # final read
                m0 = offsets("m", leaf)
                trace.add_store("E", geom.cover["m"] * geom.cover["l"] * elt)
                e_out[m0:m0 + geom.cover["m"], l0:l0 + geom.cover["l"]] += e_accum.pop(key)

        for leaf in itertools.product(*trip_ranges):
            tm, tn, tk, tl = (trip(leaf, d) for d in DIMS)
            if completion:
                if (tm, tn, tk) not in gemm0_done:
                    gemm0_done.add((tm, tn, tk))
                    acc0, acc1 = run_gemm0(leaf)
                    key = (tm, tn)
                    if key in partials:
                        old0, old1 = partials[key]
                        acc0 = old0 + acc0
                        acc1 = old1 + acc1 if gated else None
                    partials[key] = (acc0, acc1)
                    if tk == k_trips - 1:
                        region = combine(*partials.pop(key))
                        trace.add_primitive(
                            "all_exchange", blocks * (cl.cls_k - 1) * exchange_payload
                        )
                        trace.charge_region(c_slots[c_slot(tm, tn)], blocks)  # write
                        c_complete[key] = region
                if (tm, tn) in c_complete and (tm, tn, tl) not in gemm1_done:
                    gemm1_done.add((tm, tn, tl))
                    fire_gemm1(c_complete[(tm, tn)], leaf)
            else:
                prefix = tuple(leaf[i] for i in inc_levels)
                if prefix != last_inc_prefix[0]:
                    last_inc_prefix[0] = prefix
                    acc0, acc1 = run_gemm0(leaf)
                    trace.add_primitive(
                        "all_exchange", blocks * (cl.cls_k - 1) * exchange_payload
                    )
                    # Combine applies per increment: exact only when a single
                    # batch covers the whole reduction or the combine is linear.
                    c_complete["inc"] = combine(acc0, acc1)
                g1_prefix = tuple(leaf[i] for i in gemm1_levels)
                if g1_prefix != last_gemm1_prefix[0]:
                    last_gemm1_prefix[0] = g1_prefix
                    fire_gemm1(c_complete["inc"], leaf)

    # The stacked-weight stream splits evenly between the two branches.
    if "_Bstream" in trace.per_tensor:
        total = trace.per_tensor.pop("_Bstream")["loads"]
        assert total % 2 == 0
        trace.per_tensor["B0"] = {"loads": total // 2}
        trace.per_tensor["B1"] = {"loads": total // 2}

    # Split plain stores from the extra inter-cluster atomic-reduce writes.
    reducers = geom.grid["n"] * geom.grid["k"]
    if reducers > 1 and "E" in trace.per_tensor:
        total = trace.per_tensor["E"]["stores"]
        trace.primitives["inter_cluster_reduce"] = total - total // reducers

    return e_out, trace


# ---------------------------------------------------------------------------
# Verification.
# ---------------------------------------------------------------------------


@dataclass
class VerifyReport:
    max_rel_error: float
    tolerance: float
    numerics_pass: bool
    parity: Optional[dict]  # tier -> simulator minus analyzer bytes
    parity_pass: Optional[bool]
    literal_mode: bool = False

    @property
    def passed(self) -> bool:
        if not self.numerics_pass:
            return False
        if self.parity_pass is None:
            return True
        return self.parity_pass

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "numerics_pass": self.numerics_pass,
            "parity_delta_bytes": self.parity,
            "parity_pass": self.parity_pass,
            "literal_mode": self.literal_mode,
            "pass": self.passed,
        }


def verify(plan: FusionPlan, graph: ChainGraph, config: SimConfig = SimConfig(),
           check_parity: bool = True, device: Optional[DeviceModel] = None,
           literal: bool = False) -> VerifyReport:
    device = device or default_h100()
    inputs = make_inputs(graph, config)
    reference = oracle(graph, inputs)
    result, trace = execute_plan(plan, graph, inputs, config, device)
    err = max_relative_error(result, reference)
    tol = config.effective_tolerance
    parity = None
    parity_pass = None
    if check_parity:
        analysis = analyze(graph, device, plan, config.acc_size, literal=literal)
        parity = {
            t: trace.tier_bytes[t] - analysis.volume[t] for t in trace.tier_bytes
        }
        parity_pass = not literal and all(v == 0 for v in parity.values())
        if literal:
            parity_pass = None  # deltas are informational in literal mode
    return VerifyReport(
        max_rel_error=err,
        tolerance=tol,
        numerics_pass=err <= tol,
        parity=parity,
        parity_pass=parity_pass,
        literal_mode=literal,
    )


# ---------------------------------------------------------------------------
# Unfused baseline: two separate kernels, intermediate round-trips global.
# ---------------------------------------------------------------------------


def unfused_baseline(graph: ChainGraph, inputs: dict, plan: FusionPlan):
    """Simulate the chain as two singleton-cluster kernels.

    The first kernel stores the full intermediate to global memory; the
    second reads it back in full.  Tile sizes and loop order project from
    the given plan, so the comparison isolates exactly the fusion effect.
    """
    d = graph.dims
    elt = d.element_size
    blk = plan.tiles.block
    sched = plan.schedule
    trace = TrafficTrace()

    def kernel_loads(phase_dims, tensors):
        """Replay one kernel's nest with singleton clusters, counting loads.

        tensors: list of (name, index_dims, tile_bytes) whose loads follow
        the shared residency rule.
        """
        spatial = [x for x in phase_dims if x in sched.spatial]
        temporal = [x for x in sched.temporal_order if x in phase_dims]
        trips = {x: d.size(x) // blk[x] for x in temporal}
        grid = prod(d.size(x) // blk[x] for x in spatial) if spatial else 1
        levels = {x: i + 1 for i, x in enumerate(temporal)}
        caches = {}
        for name, idx_dims, _ in tensors:
            depth = max((levels[x] for x in idx_dims if x in levels), default=0)
            caches[name] = [i for i, x in enumerate(temporal) if levels[x] <= depth]
        last = {name: None for name, *_ in tensors}
        for leaf in itertools.product(*[range(trips[x]) for x in temporal]):
            for name, idx_dims, tile_bytes in tensors:
                key = tuple(leaf[i] for i in caches[name])
                if key != last[name]:
                    last[name] = key
                    trace.add_load(name, tile_bytes * grid)

    # Kernel 0: first GEMM, intermediate written to global in full (atomic
    # partials when its reduction is grid-spatial).
    kernel_loads(
        ("m", "n", "k"),
        [("A", ("m", "k"), blk["m"] * blk["k"] * elt)]
        + ([("B0", ("k", "n"), blk["k"] * blk["n"] * elt),
            ("B1", ("k", "n"), blk["k"] * blk["n"] * elt)]
           if graph.kind == GATED_FFN
           else [("B", ("k", "n"), blk["k"] * blk["n"] * elt)]),
    )
    c_bytes = d.m * d.n * elt
    c_copies = (d.k // blk["k"]) if "k" in sched.spatial else 1
    trace.add_store("C", c_bytes * c_copies)

    # Kernel 1: second GEMM; the intermediate is read back exactly once.
    trace.add_load("C", c_bytes)
    kernel_loads(("m", "n", "l"), [("D", ("n", "l"), blk["n"] * blk["l"] * elt)])
    e_copies = (d.n // blk["n"]) if "n" in sched.spatial else 1
    trace.add_store("E", d.m * d.l * elt * e_copies)

    a = inputs["A"]
    if graph.kind == GATED_FFN:
        c = _act(SILU, a @ inputs["B0"]) * (a @ inputs["B1"])
    else:
        c = _act(graph.activation, a @ inputs["B"])
    return c @ inputs["D"], trace


# ---------------------------------------------------------------------------
# Random valid plans (for property suites and verification sweeps).
# ---------------------------------------------------------------------------


def sample_valid_plans(graph: ChainGraph, device: DeviceModel, count: int,
                       seed: int = 0, acc_size: int = DEFAULT_ACC_SIZE,
                       max_attempts: int = 200000) -> list[FusionPlan]:
    """Uniform-ish random draws from the candidate space, kept when they pass
    every pruning rule.  Deterministic for a fixed seed."""
    import random

    from .plan import FusionPlan as _FP, TileSizes, enumerate_schedules
    from .search import (
        _c_region_budget,
        _k_choices,
        _rule2_clusters,
        _streams,
        rule4_dependency,
        rule5_capacity,
    )

    rng = random.Random(seed)
    streams = _streams(graph, device)
    per_stream = {s.lowering: _rule2_clusters(s, device) for s in streams}
    schedules = enumerate_schedules(DIMS)
    out = []
    seen = set()
    for _ in range(max_attempts):
        if len(out) >= count:
            break
        stream = streams[rng.randrange(len(streams))]
        schedule = schedules[rng.randrange(len(schedules))]
        if not rule4_dependency(schedule):
            continue
        clusters = per_stream[stream.lowering]
        cluster = clusters[rng.randrange(len(clusters))]
        k_opts = _k_choices(stream, schedule, cluster, graph, False,
                            stream.tiles_divisible["k"])
        if not k_opts:
            continue
        block = {
            "m": rng.choice(stream.tiles_divisible["m"]),
            "n": rng.choice(stream.tiles_divisible["n"]),
            "k": rng.choice(k_opts),
            "l": rng.choice(stream.tiles_divisible["l"]),
        }
        plan = _FP(schedule, TileSizes(block, dict(cluster)), stream.lowering)
        if structural_violations(plan, graph, device):
            continue
        if not rule5_capacity(plan, graph, device, acc_size):
            continue
        if plan.key in seen:
            continue
        seen.add(plan.key)
        out.append(plan)
    if len(out) < count:
        raise PlanError(
            f"could only sample {len(out)} of {count} valid plans"
        )
    return out
