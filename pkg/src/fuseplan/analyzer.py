"""Dataflow analysis: per-tier data-movement volumes and resource mapping for a plan.

The analyzer walks nothing: it evaluates closed forms derived from the loop
structure.  The simulator replays the same loop nest tile by tile; for every
structurally valid plan the two must agree on every tier counter with exact
integer equality.  That parity is the package's core correctness contract,
so the conventions below are normative for both sides:

* Inputs stream from global through smem.  A tile is (re)loaded whenever any
  temporal loop at or outside its innermost indexing level advances while
  the tile is actually needed; loops nested strictly inside keep it
  resident.
* The intermediate is materialized once per region (never recomputed) when
  the first reduction completes innermost ("completion mode").  When the
  first reduction is scheduled outside other loops ("increment mode", only
  meaningful for identity-combine chains) partial products stream straight
  into the second GEMM and nothing is materialized.
* Reused tensors (intermediate and output accumulator) occupy a live region
  whose span along each dimension depends on the schedule; the region is
  placed greedily reg -> smem -> dsm (-> l2 -> global for the output).
  Every touch of a region tile charges the tier(s) its slot maps to; l2
  charges are accounted to the global tier.
* Inter-block communication bytes are counted as received bytes: an
  exchange group of g blocks moves g*(g-1) tiles, a shuffle ring of g blocks
  moves g-1 tiles into each member, a reduce set of r partials moves r-1
  tiles.  Partial accumulators inside the MMA loop live in registers and are
  not charged.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Optional

from .errors import CapacityExceeded, WrongTensorClass
from .hardware import DeviceModel
from .plan import (
    LOWERING_DOUBLED_K,
    LOWERING_SPATIAL_SPLIT,
    FusionPlan,
    PlanGeometry,
    plan_geometry,
)
from .workload import DIMS, GATED_FFN, ROLE_INTERMEDIATE, ROLE_OUTPUT, ChainGraph

TIERS = ("reg", "smem", "dsm", "l2", "global")
DEFAULT_ACC_SIZE = 4  # bytes per on-chip partial element (f32 accumulators)


def tile_footprint(tensor, block: dict, element_size: int) -> int:
    """Bytes of one block tile of the tensor: product of its block extents."""
    count = 1
    for d in DIMS:
        if tensor.indexed_by(d):
            count *= block[d]
    return count * element_size


# ---------------------------------------------------------------------------
# Event counts shared by all traffic formulas.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventCounts:
    """Per-cluster firing counts and per-block load multipliers for one plan."""

    a_loads: int          # per block: A tile loads
    b_loads: int          # per block: weight-stream tile loads (per branch stream)
    d_loads: int          # per block: D load events (each brings g1 tiles)
    exchanges: int        # per cluster: exchange firings
    gemm1_fires: int      # per cluster: consumption firings (ring passes)
    stores: int           # per cluster: output store events


def _event_counts(geom: PlanGeometry, levels: dict) -> EventCounts:
    ordered = sorted((lvl, d) for d, lvl in levels.items())

    def deepest(dims_of_interest) -> int:
        return max((lvl for lvl, d in ordered if d in dims_of_interest), default=0)

    def prod_to(depth: int, allowed) -> int:
        p = 1
        for lvl, d in ordered:
            if lvl <= depth and d in allowed:
                p *= geom.trips[d]
        return p

    def prod_dims(dims_of_interest) -> int:
        return prod(geom.trips[d] for d in dims_of_interest if d in levels)

    everything = set(DIMS)
    if geom.completion_mode:
        # Production never re-fires when a consumer loop revisits the region,
        # so loops over l do not multiply first-GEMM loads; symmetrically no
        # consumption happens while the reduction loop is mid-sweep.
        a_loads = prod_to(deepest({"m", "k"}), {"m", "n", "k"})
        b_loads = prod_to(deepest({"k", "n"}), {"m", "n", "k"})
        d_loads = prod_to(deepest({"n", "l"}), {"m", "n", "l"})
        exchanges = prod_dims({"m", "n"})
        gemm1_fires = prod_dims({"m", "n", "l"})
    else:
        a_loads = prod_to(deepest({"m", "k"}), everything)
        b_loads = prod_to(deepest({"k", "n"}), everything)
        d_loads = prod_to(deepest({"n", "l"}), everything)
        exchanges = prod_to(deepest({"m", "n", "k"}), everything)
        gemm1_fires = prod_to(deepest({"m", "n", "l"}), everything)
    stores = prod_dims({"m", "l"})
    return EventCounts(a_loads, b_loads, d_loads, exchanges, gemm1_fires, stores)


# ---------------------------------------------------------------------------
# Liveness of reused tensors.
# ---------------------------------------------------------------------------


def live_tile_counts(graph: ChainGraph, plan: FusionPlan,
                     geom: Optional[PlanGeometry] = None) -> dict:
    """Live region of each reused tensor, in tiles along its dimensions.

    The intermediate stays live along a dimension whenever the consumer loop
    (l) sits outside that dimension's loop: every position produced there
    will be consumed again before dying.  The output accumulator stays live
    along a dimension whenever a reduction-driving loop sits outside it.
    Spatial dims never hold more than the block's own tile.
    """
    geom = geom or plan_geometry(graph, plan)
    levels = geom.levels

    def full_span(dim: str, driver_dims) -> bool:
        lvl = levels.get(dim)
        if lvl is None:
            return False
        return any(levels.get(drv, 10**9) < lvl for drv in driver_dims)

    if geom.completion_mode:
        c_live = {
            "m": geom.trips["m"] if full_span("m", ("l",)) else 1,
            "n": geom.trips["n"] if full_span("n", ("l",)) else 1,
        }
        e_drivers = ("n",)
    else:
        # Increments are consumed as they are produced; only one tile exists.
        c_live = {"m": 1, "n": 1}
        e_drivers = ("n", "k")
    e_live = {
        "m": geom.trips["m"] if full_span("m", e_drivers) else 1,
        "l": geom.trips["l"] if full_span("l", e_drivers) else 1,
    }
    return {"C": c_live, "E": e_live}


# ---------------------------------------------------------------------------
# Greedy placement.
# ---------------------------------------------------------------------------


def place_tensor(footprint_bytes: int, levels, spill_floor: str, occupancy: dict,
                 tensor_name: str = "?") -> dict:
    """Greedy fill of an ordered hierarchy, stopping at the spill floor.

    levels: ordered sequence of (name, capacity or None).  occupancy maps
    level name to bytes already committed there and is updated in place.
    Raises CapacityExceeded when bytes remain past the floor.
    """
    mapping: dict = {}
    remaining = int(footprint_bytes)
    for name, capacity in levels:
        if remaining <= 0:
            break
        if capacity is None:
            free = remaining
        else:
            free = max(0, int(capacity) - occupancy.get(name, 0))
        alloc = min(remaining, free)
        if alloc > 0:
            mapping[name] = alloc
            occupancy[name] = occupancy.get(name, 0) + alloc
            remaining -= alloc
        if name == spill_floor:
            break
    if remaining > 0:
        raise CapacityExceeded(tensor_name, spill_floor, remaining)
    return mapping


class ResourcePlacer:
    """Hierarchy view for one plan: per-block capacities and cross-debits.

    The dsm stage exposes the cluster's pooled shared memory per block: the
    pool is cluster_blocks * smem, so its per-block share is exactly one
    smem, and every smem allocation debits it too (the pool is the union of
    the cluster's shared memories, not extra storage).  Capacity relief at
    larger clusters comes from cluster-splitting shrinking live regions, not
    from the pool growing per block.
    """

    def __init__(self, device: DeviceModel, geom: PlanGeometry):
        self.device = device
        self.geom = geom
        smem_cap = int(device.smem.capacity_bytes)
        total_blocks = geom.num_clusters * geom.blocks
        l2_share = None
        if device.l2 is not None and total_blocks > 0:
            l2_share = int(device.l2.capacity_bytes) // total_blocks
        self.capacity = {
            "reg": int(device.reg.capacity_bytes),
            "smem": smem_cap,
            "dsm": smem_cap,
            "l2": l2_share,
            "global": None,
        }
        self.occupancy = {name: 0 for name in TIERS}

    def levels_down_to(self, floor: str):
        out = []
        for name in TIERS:
            if name == "l2" and self.capacity["l2"] is None:
                continue
            out.append((name, self.capacity[name]))
            if name == floor:
                break
        return out

    def place(self, name: str, footprint: int, floor: str) -> dict:
        mapping: dict = {}
        remaining = int(footprint)
        for level, capacity in self.levels_down_to(floor):
            if remaining <= 0:
                break
            free = remaining if capacity is None else max(
                0, int(capacity) - self.occupancy[level]
            )
            alloc = min(remaining, free)
            if alloc > 0:
                mapping[level] = alloc
                self.occupancy[level] += alloc
                if level == "smem":  # local smem use consumes the pooled share too
                    self.occupancy["dsm"] += alloc
                remaining -= alloc
            if level == floor:
                break
        if remaining > 0:
            raise CapacityExceeded(name, floor, remaining)
        return mapping

    def headroom(self) -> dict:
        out = {}
        for name in TIERS:
            cap = self.capacity[name]
            out[name] = None if cap is None else max(0, cap - self.occupancy[name])
        return out


def slot_tier_bytes(mapping: dict, region_tiles: int, tile_bytes: int) -> list[dict]:
    """Per-slot byte split across tiers for a placed region.

    Slot s owns byte range [s*tile_bytes, (s+1)*tile_bytes) of the region;
    the greedy allocation lays tiers out contiguously in hierarchy order.
    """
    boundaries = []
    offset = 0
    for name in TIERS:
        if name in mapping:
            boundaries.append((offset, offset + mapping[name], name))
            offset += mapping[name]
    splits = []
    for slot in range(region_tiles):
        lo, hi = slot * tile_bytes, (slot + 1) * tile_bytes
        split: dict = {}
        for b_lo, b_hi, name in boundaries:
            take = min(hi, b_hi) - max(lo, b_lo)
            if take > 0:
                split[name] = split.get(name, 0) + take
        splits.append(split)
    return splits


def region_tier_totals(mapping: dict) -> dict:
    """Traffic tier for each allocation level (l2 spill traffic hits global)."""
    out = {t: 0 for t in TIERS}
    for name, nbytes in mapping.items():
        out["global" if name == "l2" else name] += nbytes
    return out


# ---------------------------------------------------------------------------
# Traffic closed forms.
# ---------------------------------------------------------------------------


def _input_load_totals(graph: ChainGraph, geom: PlanGeometry, ev: EventCounts) -> dict:
    """Global-tier load bytes per input tensor across the whole device."""
    elt = graph.dims.element_size
    blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}  # block tile per dim
    blocks_total = geom.num_clusters * geom.blocks
    g1 = geom.cluster.cls_shuffle

    f_a = blk["m"] * blk["k"] * elt
    f_b = blk["k"] * blk["n"] * elt
    f_d = blk["n"] * blk["l"] * elt

    out = {"A": ev.a_loads * f_a * blocks_total,
           "D": ev.d_loads * g1 * f_d * blocks_total}
    weight_total = ev.b_loads * f_b * blocks_total
    if graph.kind == GATED_FFN:
        # Both branch weights move the same volume: either half the blocks
        # stream one branch each, or every block streams the stacked K range.
        assert weight_total % 2 == 0
        out["B0"] = weight_total // 2
        out["B1"] = weight_total // 2
    else:
        out["B"] = weight_total
    return out


def _store_totals(graph: ChainGraph, geom: PlanGeometry, ev: EventCounts) -> tuple[int, int]:
    """(base store bytes, extra inter-cluster atomic-reduce bytes) for the output."""
    elt = graph.dims.element_size
    blk_m = geom.cover["m"] // geom.split["m"]
    blk_l = geom.cover["l"] // geom.split["l"]
    per_store = geom.cluster.cls_m * geom.cluster.cls_l * blk_m * blk_l * elt
    total = geom.num_clusters * ev.stores * per_store
    reducers = geom.grid["n"] * geom.grid["k"]
    assert total % reducers == 0
    base = total // reducers
    return base, total - base


def dsm_traffic(graph: ChainGraph, plan: FusionPlan, acc_size: int = DEFAULT_ACC_SIZE,
                geom: Optional[PlanGeometry] = None,
                events: Optional[EventCounts] = None) -> dict:
    """Inter-block fabric bytes per primitive for the whole execution."""
    geom = geom or plan_geometry(graph, plan)
    ev = events or _event_counts(geom, geom.levels)
    cl = geom.cluster
    blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}
    f_c = blk["m"] * blk["n"] * acc_size
    f_e = blk["m"] * blk["l"] * acc_size

    payload = f_c
    if plan.gated_lowering == LOWERING_DOUBLED_K and cl.cls_k > 1:
        payload = 2 * f_c  # both branch accumulators travel

    exchange = ev.exchanges * geom.blocks * (cl.cls_k - 1) * payload
    shuffle = ev.gemm1_fires * geom.blocks * (cl.cls_shuffle - 1) * f_c
    reduce_scatter = ev.stores * cl.cls_m * cl.cls_l * (cl.cls_reduce - 1) * f_e
    n = geom.num_clusters
    return {
        "all_exchange": n * exchange,
        "shuffle": n * shuffle,
        "reduce_scatter": n * reduce_scatter,
    }


def io_traffic(graph: ChainGraph, plan: FusionPlan, tensor_name: str,
               literal: bool = False) -> int:
    """Global-tier bytes for one input or output tensor under the plan.

    Default semantics are schedule-sensitive (reuse-aware).  literal=True
    multiplies the block footprint only over the temporal loops that index
    the tensor, once per device, matching the naive per-tensor recurrence.
    """
    tensor = graph.tensor(tensor_name)
    if tensor.role == ROLE_INTERMEDIATE:
        raise WrongTensorClass(f"{tensor_name} is an intermediate, not an I/O tensor")
    geom = plan_geometry(graph, plan)
    if literal:
        blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}
        bytes_ = tile_footprint(tensor, blk, graph.dims.element_size)
        for d in DIMS:
            if tensor.indexed_by(d) and d in geom.levels:
                bytes_ *= -(-geom.eff[d] // blk[d])  # ceil
        return bytes_
    ev = _event_counts(geom, geom.levels)
    if tensor.role == ROLE_OUTPUT:
        base, extra = _store_totals(graph, geom, ev)
        return base + extra
    return _input_load_totals(graph, geom, ev)[tensor_name]


# ---------------------------------------------------------------------------
# Full analysis.
# ---------------------------------------------------------------------------


@dataclass
class AnalysisResult:
    volume: dict                 # tier -> bytes (the data-movement volume)
    primitives: dict             # dsm primitive -> bytes, plus inter_cluster_reduce
    per_tensor: dict             # tensor -> {"loads": bytes} / {"stores": bytes}
    mapping: dict                # tensor -> {level: bytes}
    headroom: dict               # level -> free bytes after placement
    live_tiles: dict             # tensor -> {dim: live tile count}
    mode: str                    # "completion" | "increment"
    plan: FusionPlan             # plan with mapping attached

    def report_dict(self) -> dict:
        return {
            "volume_bytes": {t: int(self.volume[t]) for t in TIERS},
            "primitives_bytes": {k: int(v) for k, v in sorted(self.primitives.items())},
            "per_tensor": {k: dict(v) for k, v in sorted(self.per_tensor.items())},
            "mapping": {t: dict(sorted(m.items())) for t, m in sorted(self.mapping.items())},
            "headroom_bytes": {
                k: (None if v is None else int(v)) for k, v in self.headroom.items()
            },
            "live_tiles": {t: dict(v) for t, v in sorted(self.live_tiles.items())},
            "mode": self.mode,
        }


def analyze(graph: ChainGraph, device: DeviceModel, plan: FusionPlan,
            acc_size: int = DEFAULT_ACC_SIZE, literal: bool = False) -> AnalysisResult:
    """Data-movement volume and completed resource mapping for a plan.

    Pure function of its inputs; raises CapacityExceeded when a reused
    tensor cannot be placed above its spill floor.
    """
    geom = plan_geometry(graph, plan)
    ev = _event_counts(geom, geom.levels)
    blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}
    live = live_tile_counts(graph, plan, geom)

    f_c = blk["m"] * blk["n"] * acc_size
    f_e = blk["m"] * blk["l"] * acc_size
    c_region_tiles = live["C"]["m"] * live["C"]["n"]
    e_region_tiles = live["E"]["m"] * live["E"]["l"]

    placer = ResourcePlacer(device, geom)
    mapping = {}
    mapping["C"] = placer.place("C", c_region_tiles * f_c, graph.intermediate.spill_floor)
    mapping["E"] = placer.place("E", e_region_tiles * f_e, graph.output.spill_floor)

    volume = {t: 0 for t in TIERS}
    per_tensor: dict = {}

    # Inputs: global loads, each landing once in smem.
    if literal:
        loads = {
            t.name: io_traffic(graph, plan, t.name, literal=True) for t in graph.inputs
        }
    else:
        loads = _input_load_totals(graph, geom, ev)
    for name, nbytes in loads.items():
        per_tensor[name] = {"loads": nbytes}
        volume["global"] += nbytes
        volume["smem"] += nbytes

    # Output stores (atomic inter-cluster reduction counted as extra writes).
    if literal:
        base = io_traffic(graph, plan, "E", literal=True)
        extra = 0
    else:
        base, extra = _store_totals(graph, geom, ev)
    per_tensor["E"] = {"stores": base + extra}
    volume["global"] += base + extra

    # Inter-block primitives.
    prims = dsm_traffic(graph, plan, acc_size, geom, ev)
    volume["dsm"] += sum(prims.values())
    prims["inter_cluster_reduce"] = extra

    # Reused-region touches, charged where each region slot lives.
    per_block_scale = geom.num_clusters * geom.blocks
    if geom.completion_mode:
        c_tiers = region_tier_totals(mapping["C"])
        sweeps_c = (geom.trips["m"] // live["C"]["m"]) * (geom.trips["n"] // live["C"]["n"])
        c_touches = sweeps_c * (1 + geom.trips["l"])  # one write, trips_l reads per epoch
        for tier, nbytes in c_tiers.items():
            volume[tier] += c_touches * nbytes * per_block_scale

    e_tiers = region_tier_totals(mapping["E"])
    sweeps_e = (geom.trips["m"] // live["E"]["m"]) * (geom.trips["l"] // live["E"]["l"])
    fires_per_tile = ev.gemm1_fires // (geom.trips["m"] * geom.trips["l"])
    e_touches = sweeps_e * (2 * fires_per_tile + 1)  # RMW per fire + final read
    for tier, nbytes in e_tiers.items():
        volume[tier] += e_touches * nbytes * per_block_scale

    return AnalysisResult(
        volume=volume,
        primitives=prims,
        per_tensor=per_tensor,
        mapping=mapping,
        headroom=placer.headroom(),
        live_tiles=live,
        mode="completion" if geom.completion_mode else "increment",
        plan=plan.with_mapping(mapping),
    )


def placement_feasible(graph: ChainGraph, device: DeviceModel, plan: FusionPlan,
                       acc_size: int = DEFAULT_ACC_SIZE) -> bool:
    """True when every reused tensor fits above its spill floor (capacity rule)."""
    try:
        geom = plan_geometry(graph, plan)
    except Exception:
        return False
    blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}
    live = live_tile_counts(graph, plan, geom)
    placer = ResourcePlacer(device, geom)
    try:
        placer.place("C", live["C"]["m"] * live["C"]["n"] * blk["m"] * blk["n"] * acc_size,
                     graph.intermediate.spill_floor)
        placer.place("E", live["E"]["m"] * live["E"]["l"] * blk["m"] * blk["l"] * acc_size,
                     graph.output.spill_floor)
    except CapacityExceeded:
        return False
    return True
