"""DOT export of the tile graph one cluster executes under a plan.

Nodes are tiles (inputs, per-block partials, complete intermediate tiles,
output partials, stored outputs); edges are transfers weighted in bytes.
The graph shows a single cluster over one temporal step, which is the
repeating unit of the whole execution.
"""

from __future__ import annotations

from .analyzer import DEFAULT_ACC_SIZE
from .plan import LOWERING_SPATIAL_SPLIT, FusionPlan, plan_geometry
from .workload import DIMS, GATED_FFN, ChainGraph


def _fmt(nbytes: int) -> str:
    if nbytes >= 1 << 20:
        return f"{nbytes / (1 << 20):.1f}MiB"
    if nbytes >= 1 << 10:
        return f"{nbytes / (1 << 10):.1f}KiB"
    return f"{nbytes}B"


def export_tilegraph(graph: ChainGraph, plan: FusionPlan,
                     acc_size: int = DEFAULT_ACC_SIZE) -> str:
    geom = plan_geometry(graph, plan)
    cl = geom.cluster
    blk = {d: geom.cover[d] // geom.split[d] for d in DIMS}
    elt = graph.dims.element_size
    f_a = blk["m"] * blk["k"] * elt
    f_b = blk["k"] * blk["n"] * elt
    f_d = blk["n"] * blk["l"] * elt
    f_c = blk["m"] * blk["n"] * acc_size
    f_e_acc = blk["m"] * blk["l"] * acc_size
    f_e = blk["m"] * blk["l"] * elt
    gated = graph.kind == GATED_FFN
    g1 = cl.cls_shuffle
    half = cl.cls_k // 2 if plan.gated_lowering == LOWERING_SPATIAL_SPLIT else None

    lines = [
        "digraph tilegraph {",
        "  rankdir=LR;",
        "  node [shape=box, fontsize=10];",
        f'  label="one cluster step: {plan.describe()}";',
    ]

    def node(name, label, shape="box", style=None):
        extra = f', style="{style}"' if style else ""
        lines.append(f'  "{name}" [label="{label}", shape={shape}{extra}];')

    def edge(src, dst, label, color="black"):
        lines.append(f'  "{src}" -> "{dst}" [label="{label}", color={color}];')

    weight_names = ("B0", "B1") if gated else ("B",)
    for im in range(cl.cls_m):
        for i_n in range(cl.cls_n):
            for ik in range(cl.cls_k):
                b = f"blk_m{im}n{i_n}k{ik}"
                a_node = f"A[{im},{ik}]"
                node(a_node, f"A tile ({_fmt(f_a)})", "ellipse")
                part = f"Cpart[{im},{i_n}]({ik})"
                node(part, f"partial C [{im},{i_n}] from k-slice {ik}")
                edge(a_node, part, _fmt(f_a))
                if half is not None:
                    wname = "B0" if ik < half else "B1"
                else:
                    wname = weight_names[0] if len(weight_names) == 1 else "B0/B1"
                w_node = f"{wname}[{ik},{i_n}]"
                node(w_node, f"{wname} tile ({_fmt(f_b)})", "ellipse")
                edge(w_node, part, _fmt(f_b))

    # Exchange: every block in a k-group receives the other partials.
    for im in range(cl.cls_m):
        for i_n in range(cl.cls_n):
            full = f"C[{im},{i_n}]"
            node(full, f"C tile [{im},{i_n}] ({_fmt(f_c)})", "box", "bold")
            for ik in range(cl.cls_k):
                part = f"Cpart[{im},{i_n}]({ik})"
                lbl = f"all_exchange {_fmt(f_c * max(0, cl.cls_k - 1))}" \
                    if cl.cls_k > 1 else "complete"
                edge(part, full, lbl, "blue")

    # Shuffle: rings of g1 blocks circulate the intermediate slices.
    for im in range(cl.cls_m):
        for ir in range(cl.cls_reduce):
            for il_local in range(g1):
                src_n = ir * g1 + il_local
                if cl.cls_n == 1 and src_n >= 1:
                    continue
                src = f"C[{im},{min(src_n, cl.cls_n - 1)}]"
                for il in range(cl.cls_l):
                    if il % max(1, cl.cls_k) != il_local % max(1, cl.cls_k) and g1 > 1:
                        continue
                    part_e = f"Epart[{im},{il}]({ir})"
                    node(part_e, f"partial E [{im},{il}] from n-set {ir}")
                    lbl = f"shuffle {_fmt(f_c)}" if g1 > 1 else "local"
                    edge(src, part_e, lbl, "red")

    # Scatter-reduce and store.
    for im in range(cl.cls_m):
        for il in range(cl.cls_l):
            out = f"E[{im},{il}]"
            node(out, f"E tile [{im},{il}] ({_fmt(f_e)})", "box", "bold")
            for ir in range(cl.cls_reduce):
                part_e = f"Epart[{im},{il}]({ir})"
                lbl = (
                    f"reduce_scatter {_fmt(f_e_acc * max(0, cl.cls_reduce - 1))}"
                    if cl.cls_reduce > 1 else "store"
                )
                edge(part_e, out, lbl, "darkgreen")

    lines.append("}")
    return "\n".join(lines) + "\n"
