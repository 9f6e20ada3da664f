"""Fusion search engine: candidate enumeration, pruning rules, minimax cost, top-K.

Pruning applies five rules in a fixed reporting order:

  1. block tiles are hardware-granular and divide their extents
  2. the cluster shape respects the block-count limit and has integral
     communication groups
  3. the first reduction completes before any non-linear combine consumes it
  4. the output-column dimension is not grid-spatial (grid cells cannot
     exchange the intermediate)
  5. reused tensors can actually be mapped: cluster tiles divide their
     extents and live regions fit above their spill floors

Counting is exact integer arithmetic throughout; the initial space for large
chains exceeds 10^13 candidates, so stages 0-4 are evaluated with closed
forms and only the final capacity stage enumerates tile pairs.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import prod
from typing import Iterator, Optional

from .analyzer import DEFAULT_ACC_SIZE, AnalysisResult, analyze, placement_feasible
from .errors import EmptySpace, InfeasibleCluster, PlanError
from .hardware import DeviceModel, dsm_bandwidth, with_cluster_options
from .plan import (
    LOWERING_DOUBLED_K,
    LOWERING_NA,
    LOWERING_SPATIAL_SPLIT,
    FusionPlan,
    LoopSchedule,
    TileSizes,
    derive_cluster_groups,
    enumerate_schedules,
    plan_geometry,
)
from .workload import DIMS, GATED_FFN, IDENTITY, ChainGraph

STAGES = ("initial", "rule1", "rule2", "rule3", "rule4", "rule5")
DEFAULT_TOP_K = 11  # ranking quality saturates around ten candidates


# ---------------------------------------------------------------------------
# Cost model: per-tier transfer time, bottleneck = max.
# ---------------------------------------------------------------------------

_COST_TIERS = ("global", "dsm", "smem", "reg", "l2")


@dataclass(frozen=True)
class CostBreakdown:
    per_tier: dict
    bottleneck: str
    total: float


def cost(volume: dict, device: DeviceModel, cluster_blocks: int) -> CostBreakdown:
    per_tier = {}
    for tier in _COST_TIERS:
        v = volume.get(tier, 0)
        if tier == "l2":
            per_tier[tier] = 0.0  # spill traffic past dsm is charged to global
            continue
        bw = dsm_bandwidth(device, cluster_blocks) if tier == "dsm" else device.level(tier).bandwidth
        per_tier[tier] = v / bw
    bottleneck = max(_COST_TIERS, key=lambda t: per_tier[t])
    for tier in _COST_TIERS:  # first tier attaining the max wins ties
        if per_tier[tier] == per_tier[bottleneck]:
            bottleneck = tier
            break
    return CostBreakdown(per_tier, bottleneck, per_tier[bottleneck])


# ---------------------------------------------------------------------------
# Rule predicates.
# ---------------------------------------------------------------------------


def tile_options(extent: int, granule: int = 16) -> list[int]:
    """Block-tile choices along one dimension: granule multiples dividing it."""
    return [t for t in range(granule, extent + 1, granule) if extent % t == 0]


def rule1_divisible(block: dict, extents: dict, granule: int = 16) -> bool:
    for d in DIMS:
        blk = block[d]
        if blk < granule or blk % granule or extents[d] % blk:
            return False
    return True


def rule2_cluster(cluster: dict, device: DeviceModel, lowering: str = LOWERING_NA) -> bool:
    """Block-count limit plus integral communication groups.

    Both GEMMs run on the same blocks, so a single shape serves both; the
    second GEMM's block product equals the first's by the group identity.
    """
    for d in DIMS:
        if cluster[d] not in device.cluster_dim_options:
            return False
    if cluster["m"] * cluster["n"] * cluster["k"] > device.max_cluster_blocks:
        return False
    try:
        derive_cluster_groups(cluster["m"], cluster["n"], cluster["k"], cluster["l"])
    except InfeasibleCluster:
        return False
    if lowering == LOWERING_SPATIAL_SPLIT and (cluster["k"] < 2 or cluster["k"] % 2):
        return False
    return True


def _schedule_completion(schedule: LoopSchedule) -> bool:
    """True when the reduction loop nests innermost among the first GEMM's loops."""
    levels = {d: i + 1 for i, d in enumerate(schedule.temporal_order)}
    if "k" not in levels:
        return True
    d0 = max(levels[d] for d in ("m", "n", "k") if d in levels)
    return levels["k"] == d0


def rule3_activation(schedule: LoopSchedule, graph: ChainGraph,
                     cluster: Optional[dict] = None, block: Optional[dict] = None,
                     lowering: str = LOWERING_NA, strict: bool = False) -> bool:
    """Correctness of the combine between the GEMMs.

    A non-linear combine (relu/silu or the gated mul) may only see complete
    first-GEMM sums.  That holds when the reduction is innermost among the
    first GEMM's temporal loops, or degenerately when a single cluster step
    covers the whole reduction (one batch is the complete sum) -- the latter
    needs the tile choice, so without one this predicate is conservative.
    An identity combine commutes with partial sums, relaxing the rule unless
    strict mode keeps the literal reading.
    """
    nonlinear = graph.activation != IDENTITY or graph.kind == GATED_FFN
    if not nonlinear and not strict:
        return True
    if strict:
        if "k" in schedule.spatial:
            return False
        return schedule.temporal_order[-1] == "k"
    if cluster is None or block is None:
        return "k" not in schedule.spatial and _schedule_completion(schedule)
    eff_k = graph.dims.k * (2 if lowering == LOWERING_DOUBLED_K else 1)
    split_k = cluster["k"] // 2 if lowering == LOWERING_SPATIAL_SPLIT else cluster["k"]
    single_step = split_k * block["k"] == eff_k
    if "k" in schedule.spatial:
        return single_step  # the whole reduction lives inside one cluster
    return _schedule_completion(schedule) or single_step


def rule4_dependency(schedule: LoopSchedule) -> bool:
    """Grid cells cannot share the intermediate, so its consumer columns may
    not be grid-spatial; splitting them inside a cluster is fine (the shuffle
    ring carries the slices)."""
    return "l" not in schedule.spatial


def rule5_capacity(plan: FusionPlan, graph: ChainGraph, device: DeviceModel,
                   acc_size: int = DEFAULT_ACC_SIZE) -> bool:
    """Mappability: cluster tiles divide their extents and every reused
    tensor's live region fits above its spill floor."""
    try:
        plan_geometry(graph, plan)
    except PlanError:
        return False
    return placement_feasible(graph, device, plan, acc_size)


# ---------------------------------------------------------------------------
# Candidate space.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Stream:
    """One lowering's slice of the candidate space."""

    lowering: str
    extents: dict            # effective extents (k doubled for the stacked lowering)
    schedules: tuple
    tiles_all: dict          # dim -> count of raw tile choices (extent // granule)
    tiles_divisible: dict    # dim -> sorted divisor tile list


def _streams(graph: ChainGraph, device: DeviceModel) -> list[_Stream]:
    granule = device.mma_tile[0]
    schedules = tuple(enumerate_schedules(DIMS))
    lowerings = (LOWERING_NA,)
    if graph.kind == GATED_FFN:
        lowerings = (LOWERING_SPATIAL_SPLIT, LOWERING_DOUBLED_K)
    out = []
    for lowering in lowerings:
        extents = {d: graph.dims.size(d) for d in DIMS}
        if lowering == LOWERING_DOUBLED_K:
            extents["k"] *= 2
        out.append(
            _Stream(
                lowering=lowering,
                extents=extents,
                schedules=schedules,
                tiles_all={d: extents[d] // granule for d in DIMS},
                tiles_divisible={d: tile_options(extents[d], granule) for d in DIMS},
            )
        )
    return out


def _rule2_clusters(stream: _Stream, device: DeviceModel) -> list[dict]:
    out = []
    for combo in itertools.product(device.cluster_dim_options, repeat=4):
        cluster = dict(zip(DIMS, combo))
        if rule2_cluster(cluster, device, stream.lowering):
            out.append(cluster)
    return out


def initial_count(graph: ChainGraph, device: DeviceModel) -> int:
    """Unpruned candidate count: schedules x cluster shapes x raw tile choices."""
    options = len(device.cluster_dim_options) ** 4
    total = 0
    for stream in _streams(graph, device):
        total += len(stream.schedules) * options * prod(stream.tiles_all.values())
    return total


def _split_k(cluster: dict, lowering: str) -> int:
    return cluster["k"] // 2 if lowering == LOWERING_SPATIAL_SPLIT else cluster["k"]


def _k_choices(stream: _Stream, schedule: LoopSchedule, cluster: dict, graph: ChainGraph,
               strict: bool, divisible_only: list[int]) -> list[int]:
    """Reduction-tile choices allowed by the combine-correctness rule."""
    nonlinear = graph.activation != IDENTITY or graph.kind == GATED_FFN
    if not nonlinear and not strict:
        return divisible_only
    if strict:
        if "k" in schedule.spatial or schedule.temporal_order[-1] != "k":
            return []
        return divisible_only
    split = _split_k(cluster, stream.lowering)
    pinned = stream.extents["k"] // split if stream.extents["k"] % split == 0 else None
    if "k" not in schedule.spatial and _schedule_completion(schedule):
        return divisible_only
    if pinned is not None and pinned in divisible_only:
        return [pinned]
    return []


def _c_region_budget(device: DeviceModel) -> int:
    # Greedy placement walks reg then smem; the dsm stage is the pooled union
    # of the cluster's smem, already debited by local smem use, so the
    # intermediate fits exactly when it fits in reg + smem.
    return int(device.reg.capacity_bytes) + int(device.smem.capacity_bytes)


def _c_live_spans(schedule: LoopSchedule) -> tuple[bool, bool]:
    """(m-full, n-full) live spans of the intermediate under this schedule."""
    if not _schedule_completion(schedule):
        return (False, False)  # increments are consumed as produced
    levels = {d: i + 1 for i, d in enumerate(schedule.temporal_order)}
    l_level = levels.get("l")
    if l_level is None:
        return (False, False)
    return (
        "m" in levels and l_level < levels["m"],
        "n" in levels and l_level < levels["n"],
    )


def count_space(graph: ChainGraph, device: DeviceModel, up_to: int = 5,
                acc_size: int = DEFAULT_ACC_SIZE, strict_rule3: bool = False) -> dict:
    """Exact candidate counts after each cumulative pruning stage.

    Returns {"stages": [{"stage", "count", "reduction_from_previous"}...],
    "per_lowering": {...}} with plain integers.
    """
    granule = device.mma_tile[0]
    budget = _c_region_budget(device)
    options4 = len(device.cluster_dim_options) ** 4

    per_lowering: dict = {}
    totals = [0] * (up_to + 1)
    for stream in _streams(graph, device):
        counts = [0] * (up_to + 1)
        n_sched = len(stream.schedules)
        counts[0] = n_sched * options4 * prod(stream.tiles_all.values())
        if up_to >= 1:
            div_product = prod(len(stream.tiles_divisible[d]) for d in DIMS)
            counts[1] = n_sched * options4 * div_product
        if up_to >= 2:
            clusters = _rule2_clusters(stream, device)
            counts[2] = n_sched * len(clusters) * div_product
        if up_to >= 3:
            for schedule in stream.schedules:
                rule4_ok = rule4_dependency(schedule)
                mn_l_product = prod(
                    len(stream.tiles_divisible[d]) for d in ("m", "n", "l")
                )
                for cluster in clusters:
                    k_opts = _k_choices(
                        stream, schedule, cluster, graph, strict_rule3,
                        stream.tiles_divisible["k"],
                    )
                    if not k_opts:
                        continue
                    stage3 = mn_l_product * len(k_opts)
                    counts[3] += stage3
                    if up_to >= 4 and rule4_ok:
                        counts[4] += stage3
                        if up_to >= 5:
                            counts[5] += _stage5_count(
                                stream, schedule, cluster, k_opts, budget,
                                acc_size, graph,
                            )
        for i in range(up_to + 1):
            totals[i] += counts[i]
        per_lowering[stream.lowering] = [int(c) for c in counts]

    stages = []
    prev = None
    for i in range(up_to + 1):
        entry = {"stage": STAGES[i], "count": int(totals[i])}
        if prev not in (None, 0):
            entry["reduction_from_previous"] = 1.0 - totals[i] / prev
        prev = totals[i]
        stages.append(entry)
    return {"stages": stages, "per_lowering": per_lowering}


def _stage5_count(stream: _Stream, schedule: LoopSchedule, cluster: dict,
                  k_opts: list[int], budget: int, acc_size: int,
                  graph: ChainGraph) -> int:
    ext = stream.extents
    split = {d: cluster[d] for d in DIMS}
    split["k"] = _split_k(cluster, stream.lowering)

    def fits(d, blk):
        return ext[d] % (split[d] * blk) == 0

    k_count = sum(1 for blk in k_opts if fits("k", blk))
    l_count = sum(1 for blk in stream.tiles_divisible["l"] if fits("l", blk))
    if k_count == 0 or l_count == 0:
        return 0

    m_full, n_full = _c_live_spans(schedule)
    spatial = schedule.spatial
    pairs = 0
    for bm in stream.tiles_divisible["m"]:
        if not fits("m", bm):
            continue
        span_m = ext["m"] // cluster["m"] if (m_full and "m" not in spatial) else bm
        for bn in stream.tiles_divisible["n"]:
            if not fits("n", bn):
                continue
            span_n = ext["n"] // cluster["n"] if (n_full and "n" not in spatial) else bn
            if span_m * span_n * acc_size <= budget:
                pairs += 1
    return pairs * k_count * l_count


# ---------------------------------------------------------------------------
# Survivor stream and search.
# ---------------------------------------------------------------------------


def iter_survivors(graph: ChainGraph, device: DeviceModel,
                   acc_size: int = DEFAULT_ACC_SIZE,
                   strict_rule3: bool = False) -> Iterator[FusionPlan]:
    """All candidates surviving rules 1-5, in deterministic lexicographic order."""
    for stream in _streams(graph, device):
        clusters = _rule2_clusters(stream, device)
        for schedule in stream.schedules:
            if not rule4_dependency(schedule):
                continue
            for cluster in sorted(clusters, key=lambda c: tuple(c[d] for d in DIMS)):
                k_opts = _k_choices(
                    stream, schedule, cluster, graph, strict_rule3,
                    stream.tiles_divisible["k"],
                )
                if not k_opts:
                    continue
                yield from _survivor_tiles(
                    graph, device, stream, schedule, cluster, k_opts, acc_size
                )


def _survivor_tiles(graph, device, stream, schedule, cluster, k_opts, acc_size):
    ext = stream.extents
    split = {d: cluster[d] for d in DIMS}
    split["k"] = _split_k(cluster, stream.lowering)
    budget = _c_region_budget(device)

    def fits(d, blk):
        return ext[d] % (split[d] * blk) == 0

    m_full, n_full = _c_live_spans(schedule)
    spatial = schedule.spatial
    ks = [b for b in k_opts if fits("k", b)]
    ls = [b for b in stream.tiles_divisible["l"] if fits("l", b)]
    if not ks or not ls:
        return
    for bm in stream.tiles_divisible["m"]:
        if not fits("m", bm):
            continue
        span_m = ext["m"] // cluster["m"] if (m_full and "m" not in spatial) else bm
        for bn in stream.tiles_divisible["n"]:
            if not fits("n", bn):
                continue
            span_n = ext["n"] // cluster["n"] if (n_full and "n" not in spatial) else bn
            if span_m * span_n * acc_size > budget:
                continue
            for bk in ks:
                for bl in ls:
                    yield FusionPlan(
                        schedule,
                        TileSizes(
                            {"m": bm, "n": bn, "k": bk, "l": bl}, dict(cluster)
                        ),
                        stream.lowering,
                    )


@dataclass
class SearchEntry:
    rank: int
    plan: FusionPlan
    cost: CostBreakdown
    analysis: AnalysisResult

    def to_dict(self) -> dict:
        from .plan import plan_to_dict

        return {
            "rank": self.rank,
            "plan": plan_to_dict(self.analysis.plan),
            "cost_seconds": self.cost.total,
            "bottleneck": self.cost.bottleneck,
            "per_tier_seconds": {t: self.cost.per_tier[t] for t in _COST_TIERS},
            "analysis": self.analysis.report_dict(),
        }


@dataclass
class SearchResult:
    top: list  # SearchEntry, ascending cost
    space: dict
    evaluated: int
    ranked_by: str  # "analyzer" | "simulator"

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "evaluated": self.evaluated,
            "ranked_by": self.ranked_by,
            "top": [entry.to_dict() for entry in self.top],
        }


def _evaluate_chunk(graph, device, plans, k, acc_size):
    best = []
    seen = 0
    for plan in plans:
        seen += 1
        analysis = analyze(graph, device, plan, acc_size)
        cb = cost(analysis.volume, device, plan.cluster.blocks)
        best.append((cb.total, plan.key, plan, cb, analysis))
        if len(best) > 4 * k:
            best.sort(key=lambda e: (e[0], e[1]))
            del best[k:]
    best.sort(key=lambda e: (e[0], e[1]))
    return best[:k], seen


def search(graph: ChainGraph, device: DeviceModel, k: int = DEFAULT_TOP_K,
           threads: int = 1, acc_size: int = DEFAULT_ACC_SIZE,
           strict_rule3: bool = False,
           refine_with_simulator: Optional[bool] = None) -> SearchResult:
    """Prune, analyze and rank all candidates; return the top-k plans.

    Deterministic for fixed inputs regardless of thread count: candidates
    are partitioned into fixed chunks and merged under a total order
    (cost, then plan encoding).  The final ranking is refined by
    simulator-measured traffic when the chain is small enough to execute;
    measured and predicted volumes agree exactly, so this is a verification
    pass rather than a reordering.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    space = count_space(graph, device, up_to=5, acc_size=acc_size,
                        strict_rule3=strict_rule3)
    if space["stages"][-1]["count"] == 0:
        last = next(
            (s["stage"] for s in reversed(space["stages"]) if s["count"] > 0), "initial"
        )
        raise EmptySpace(last)

    survivors = iter_survivors(graph, device, acc_size, strict_rule3)
    evaluated = 0
    if threads <= 1:
        best, evaluated = _evaluate_chunk(graph, device, survivors, k, acc_size)
    else:
        chunks = []
        while True:
            chunk = list(itertools.islice(survivors, 4096))
            if not chunk:
                break
            chunks.append(chunk)
        merged = []
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part, n in pool.map(
                lambda ch: _evaluate_chunk(graph, device, ch, k, acc_size), chunks
            ):
                merged.extend(part)
                evaluated += n
        merged.sort(key=lambda e: (e[0], e[1]))
        best = merged[:k]

    ranked_by = "analyzer"
    if refine_with_simulator is None:
        from .simulator import fits_execution_budget

        refine_with_simulator = fits_execution_budget(graph)
    if refine_with_simulator and best:
        from .simulator import SimConfig, execute_plan, make_inputs

        rescored = []
        for total, key, plan, cb, analysis in best:
            config = SimConfig()
            inputs = make_inputs(graph, config)
            _, trace = execute_plan(analysis.plan, graph, inputs, config)
            sim_cb = cost(trace.tier_bytes, device, plan.cluster.blocks)
            rescored.append((sim_cb.total, key, plan, sim_cb, analysis))
        rescored.sort(key=lambda e: (e[0], e[1]))
        best = rescored
        ranked_by = "simulator"

    top = [
        SearchEntry(rank=i, plan=plan, cost=cb, analysis=analysis)
        for i, (_, _, plan, cb, analysis) in enumerate(best)
    ]
    return SearchResult(top=top, space=space, evaluated=evaluated, ranked_by=ranked_by)


def dsm_space_expansion(graph: ChainGraph, device: DeviceModel,
                        acc_size: int = DEFAULT_ACC_SIZE) -> dict:
    """Rule-5 survivor counts with clusters disabled vs. enabled."""
    single = with_cluster_options(device, (1,))
    base = count_space(graph, single, up_to=5, acc_size=acc_size)
    full = count_space(graph, device, up_to=5, acc_size=acc_size)
    return {
        "clusters_disabled": base["stages"][-1]["count"],
        "clusters_enabled": full["stages"][-1]["count"],
    }
