"""Command-line front door: presets, search, space counting, analysis,
simulation and DOT export.

Every subcommand writes one machine-readable JSON document (stdout, or
--out FILE) and a short human summary on stderr.  Exit codes: 0 success,
1 domain error (invalid plan, capacity, unknown preset), 2 usage error.
Identical invocations produce byte-identical JSON: keys are sorted and no
timestamps enter the payload.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .analyzer import DEFAULT_ACC_SIZE, analyze
from .errors import FusePlanError
from .hardware import default_h100, load_device_profile
from .plan import plan_from_dict, plan_to_dict
from .search import DEFAULT_TOP_K, count_space, search
from .simulator import SimConfig, make_inputs, unfused_baseline, verify
from .tilegraph import export_tilegraph
from .workload import (
    RELU,
    DimensionSpec,
    build_gated_ffn,
    build_standard_ffn,
    load_workload,
    preset,
    preset_ids,
)

# Dims flags follow the benchmark-table column order m,n,k,l: m and n are the
# first GEMM's output shape, k its reduction, l the final output columns.
_DIMS_HELP = "comma-separated m,n,k,l (first GEMM m*n over k; second m*l over n)"


def _load_graph(args):
    sources = [
        args.preset is not None,
        args.dims is not None,
        getattr(args, "workload", None) is not None,
    ]
    if sum(sources) != 1:
        raise UsageError("exactly one of --preset, --dims or --workload is required")
    if args.preset is not None:
        return preset(args.preset, element_size=args.element_size)
    if getattr(args, "workload", None) is not None:
        return load_workload(args.workload)
    parts = args.dims.split(",")
    if len(parts) != 4:
        raise UsageError(f"--dims expects four values, got {args.dims!r}")
    dims = DimensionSpec(*(int(p) for p in parts), element_size=args.element_size)
    if args.gated:
        return build_gated_ffn(dims)
    return build_standard_ffn(dims, args.activation)


def _load_device(spec_str: str):
    if spec_str in (None, "h100"):
        return default_h100()
    return load_device_profile(spec_str)


def _load_plan(ref: str):
    path, _, index = ref.partition("#")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "top" in doc:
        entries = doc["top"]
        i = int(index or 0)
        if not 0 <= i < len(entries):
            raise UsageError(f"plan index {i} out of range (file has {len(entries)})")
        return plan_from_dict(entries[i]["plan"])
    if "plan" in doc:
        return plan_from_dict(doc["plan"])
    return plan_from_dict(doc)


class UsageError(Exception):
    pass


def _emit(doc, args, summary: str) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(summary, file=sys.stderr)


def _add_graph_flags(p, with_activation=True):
    p.add_argument("--preset", help="workload preset id (see list-presets)")
    p.add_argument("--dims", help=_DIMS_HELP)
    p.add_argument("--workload", help="workload file (key = value grammar)")
    p.add_argument("--gated", action="store_true",
                   help="treat --dims as a gated chain (silu branch * linear branch)")
    if with_activation:
        p.add_argument("--activation", default="identity",
                       choices=("identity", "relu", "silu"),
                       help="combine for --dims standard chains (presets fix their own)")
    p.add_argument("--element-size", type=int, default=2, choices=(2, 4, 8),
                   help="bytes per stored scalar (default 2)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fuseplan",
        description="fusion planning and dataflow simulation for GEMM chains",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-presets", help="list benchmark workload presets")
    p.add_argument("--out")

    p = sub.add_parser("search", help="prune, cost and rank fusion plans")
    _add_graph_flags(p)
    p.add_argument("--device", default="h100", help="device profile path or 'h100'")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--acc-size", type=int, default=DEFAULT_ACC_SIZE)
    p.add_argument("--strict-combine-rule", action="store_true",
                   help="literal reading: reduction loop must be absolutely innermost")
    p.add_argument("--no-simulator-refine", action="store_true",
                   help="skip the simulator-measured re-ranking of the top list")
    p.add_argument("--out")

    p = sub.add_parser("count-space", help="exact per-stage pruning counts")
    _add_graph_flags(p)
    p.add_argument("--device", default="h100")
    p.add_argument("--rules", default="0,1,2,3,4,5",
                   help="comma list of stages to report (cumulative; max wins)")
    p.add_argument("--acc-size", type=int, default=DEFAULT_ACC_SIZE)
    p.add_argument("--out")

    p = sub.add_parser("analyze", help="per-tier data-movement volume for one plan")
    _add_graph_flags(p)
    p.add_argument("--plan", required=True, help="plan JSON path, or search output path#index")
    p.add_argument("--device", default="h100")
    p.add_argument("--acc-size", type=int, default=DEFAULT_ACC_SIZE)
    p.add_argument("--literal", action="store_true",
                   help="order-independent per-tensor traffic recurrence")
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="execute a plan on real matrices and verify")
    _add_graph_flags(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--device", default="h100")
    p.add_argument("--dtype", default="f64", choices=("f32", "f64"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--acc-size", type=int, default=DEFAULT_ACC_SIZE)
    p.add_argument("--check-oracle", action="store_true",
                   help="compare against the dense reference (always on; kept for scripts)")
    p.add_argument("--check-traffic", action="store_true",
                   help="require exact per-tier parity with the analyzer")
    p.add_argument("--literal", action="store_true",
                   help="report parity deltas against the literal analyzer mode")
    p.add_argument("--compare-baseline", action="store_true",
                   help="also simulate the unfused two-kernel baseline")
    p.add_argument("--out")

    p = sub.add_parser("export-dot", help="emit the executed tile graph as DOT")
    _add_graph_flags(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--device", default="h100")
    p.add_argument("--acc-size", type=int, default=DEFAULT_ACC_SIZE)
    p.add_argument("--out")
    return ap


def _cmd_list_presets(args) -> int:
    rows = []
    for pid in preset_ids():
        g = preset(pid)
        rows.append({
            "id": pid,
            "kind": g.kind,
            "activation": g.activation,
            "m": g.dims.m, "n": g.dims.n, "k": g.dims.k, "l": g.dims.l,
            "valid_rows": g.valid_rows,
        })
    _emit({"presets": rows}, args, f"{len(rows)} presets")
    return 0


def _cmd_search(args) -> int:
    graph = _load_graph(args)
    device = _load_device(args.device)
    print(f"searching {graph.kind} {graph.dims.as_tuple()} ...", file=sys.stderr)
    result = search(
        graph, device, k=args.top_k, threads=args.threads, acc_size=args.acc_size,
        strict_rule3=args.strict_combine_rule,
        refine_with_simulator=False if args.no_simulator_refine else None,
    )
    doc = result.to_dict()
    best = result.top[0]
    _emit(doc, args,
          f"evaluated {result.evaluated} survivors; best {best.plan.describe()} "
          f"cost {best.cost.total:.3e}s bottleneck {best.cost.bottleneck}")
    return 0


def _cmd_count_space(args) -> int:
    graph = _load_graph(args)
    device = _load_device(args.device)
    stages = [int(tok) for tok in args.rules.split(",") if tok != ""]
    up_to = max(stages) if stages else 5
    doc = count_space(graph, device, up_to=up_to, acc_size=args.acc_size)
    doc["stages"] = [s for i, s in enumerate(doc["stages"]) if i in set(stages) or not stages]
    counts = ", ".join(f"{s['stage']}={s['count']}" for s in doc["stages"])
    _emit(doc, args, counts)
    return 0


def _cmd_analyze(args) -> int:
    graph = _load_graph(args)
    device = _load_device(args.device)
    plan = _load_plan(args.plan)
    result = analyze(graph, device, plan, acc_size=args.acc_size, literal=args.literal)
    doc = {"plan": plan_to_dict(result.plan), "report": result.report_dict()}
    vol = result.volume
    _emit(doc, args,
          f"global={vol['global']} dsm={vol['dsm']} smem={vol['smem']} reg={vol['reg']} B")
    return 0


def _cmd_simulate(args) -> int:
    graph = _load_graph(args)
    device = _load_device(args.device)
    plan = _load_plan(args.plan)
    config = SimConfig(dtype=args.dtype, seed=args.seed, acc_size=args.acc_size)
    report = verify(plan, graph, config, check_parity=True, device=device,
                    literal=args.literal)
    doc = {"plan": plan_to_dict(plan), "verify": report.to_dict()}
    if args.compare_baseline:
        inputs = make_inputs(graph, config)
        _, base_trace = unfused_baseline(graph, inputs, plan)
        doc["baseline"] = base_trace.to_dict()
    ok = report.numerics_pass and (not args.check_traffic or report.parity_pass)
    _emit(doc, args,
          f"max_rel_error={report.max_rel_error:.3e} "
          f"numerics={'pass' if report.numerics_pass else 'FAIL'} "
          f"parity={'n/a' if report.parity_pass is None else ('pass' if report.parity_pass else 'FAIL')}")
    return 0 if ok else 1


def _cmd_export_dot(args) -> int:
    graph = _load_graph(args)
    _load_device(args.device)  # validates the profile reference
    plan = _load_plan(args.plan)
    text = export_tilegraph(graph, plan, acc_size=args.acc_size)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print("tile graph exported", file=sys.stderr)
    return 0


_COMMANDS = {
    "list-presets": _cmd_list_presets,
    "search": _cmd_search,
    "count-space": _cmd_count_space,
    "analyze": _cmd_analyze,
    "simulate": _cmd_simulate,
    "export-dot": _cmd_export_dot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FusePlanError as exc:
        doc = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
        if getattr(args, "out", None):
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
