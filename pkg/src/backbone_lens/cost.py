"""Static analysis of primitive graphs: shapes, parameters, MACs/FLOPs and diffs.

Accounting conventions:

* conv2d params = k*k*(in/groups)*out + 2*out (batch norm folded in, no bias)
* conv2d MACs = N * k*k*(in/groups)*out * h' * w'; FLOPs = 2 * MACs
* every other primitive costs nothing
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from ._fmt import fmt_fixed
from .arch import PrimitiveGraph
from .errors import ShapeError

Shape = tuple[int, int, int, int]


def conv_out_shape(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    """Output spatial size of a convolution or pooling window.

    Raises:
        ShapeError: if either output dimension would be < 1.
    """
    if min(h, w, kernel, stride) < 1 or padding < 0:
        raise ShapeError(f"invalid conv arithmetic h={h} w={w} k={kernel} s={stride} p={padding}")
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"output collapses to {oh}x{ow} (input {h}x{w}, k={kernel}, s={stride}, p={padding})")
    return oh, ow


def check_shape(shape) -> Shape:
    shape = tuple(shape)
    if len(shape) != 4 or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape):
        raise ShapeError(f"expected 4 positive integers (N, C, H, W), got {shape!r}")
    return shape  # type: ignore[return-value]


def infer_shapes(graph: PrimitiveGraph, input_shape) -> dict[str, Shape]:
    """Map every node id (plus ``"input"``) to its NCHW output shape.

    For ``split_c`` the entry is the shape of each part.
    """
    shapes: dict[str, Shape] = {graph.INPUT: check_shape(input_shape)}
    for node in graph.topological_order():
        ins = [shapes[src] for src, _ in node.inputs]
        p = node.params
        try:
            if node.kind == "conv2d":
                n, c, h, w = ins[0]
                if c != p["in_ch"]:
                    raise ShapeError(f"conv expects {p['in_ch']} input channels, got {c}")
                shapes[node.id] = (n, p["out_ch"], *conv_out_shape(h, w, p["kernel"], p["stride"], p["padding"]))
            elif node.kind == "maxpool2d":
                n, c, h, w = ins[0]
                shapes[node.id] = (n, c, *conv_out_shape(h, w, p["kernel"], p["stride"], p["padding"]))
            elif node.kind == "split_c":
                n, c, h, w = ins[0]
                parts = p.get("parts", 2)
                if c % parts:
                    raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
                shapes[node.id] = (n, c // parts, h, w)
            elif node.kind == "concat_c":
                first = ins[0]
                for s in ins[1:]:
                    if (s[0], s[2], s[3]) != (first[0], first[2], first[3]):
                        raise ShapeError(f"concat inputs disagree outside the channel axis: {ins}")
                shapes[node.id] = (first[0], sum(s[1] for s in ins), first[2], first[3])
            elif node.kind == "add":
                if any(s != ins[0] for s in ins[1:]):
                    raise ShapeError(f"add inputs have different shapes: {ins}")
                shapes[node.id] = ins[0]
            elif node.kind == "upsample2x":
                n, c, h, w = ins[0]
                shapes[node.id] = (n, c, 2 * h, 2 * w)
            else:  # act_silu, fusion_stub
                shapes[node.id] = ins[0]
        except ShapeError as exc:
            raise ShapeError(f"node {node.id!r}: {exc}") from exc
    return shapes


def conv_params(p: dict) -> int:
    return p["kernel"] ** 2 * (p["in_ch"] // p["groups"]) * p["out_ch"] + 2 * p["out_ch"]


def count_params(graph: PrimitiveGraph) -> tuple[dict[str, int], int]:
    per_node = {n.id: conv_params(n.params) if n.kind == "conv2d" else 0 for n in graph.nodes}
    return per_node, sum(per_node.values())


@dataclass(frozen=True)
class NodeCost:
    node_id: str
    layer: int
    kind: str
    out_shape: Shape
    params: int
    macs: int


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    out_shape: Shape
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    name: str
    input_shape: Shape
    nodes: tuple[NodeCost, ...]
    layers: tuple[LayerCost, ...]

    @property
    def params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [
                {"layer": l.index, "kind": l.kind, "out_shape": list(l.out_shape), "params": l.params, "macs": l.macs}
                for l in self.layers
            ],
            "totals": {"params": self.params, "macs": self.macs, "flops": self.flops, "gflops": self.gflops},
        }


def count_flops(graph: PrimitiveGraph, input_shape) -> CostReport:
    """Per-node and per-layer params and MACs for ``graph`` run on ``input_shape``."""
    shapes = infer_shapes(graph, input_shape)
    params, _ = count_params(graph)
    nodes = []
    for node in graph.nodes:
        out = shapes[node.id]
        macs = 0
        if node.kind == "conv2d":
            p = node.params
            n, _, oh, ow = out
            macs = n * p["kernel"] ** 2 * (p["in_ch"] // p["groups"]) * p["out_ch"] * oh * ow
        nodes.append(NodeCost(node.id, node.layer, node.kind, out, params[node.id], macs))

    if graph.layers:
        layer_rows = [(info.index, info.kind, info.output[0]) for info in graph.layers]
    else:
        last: dict[int, str] = {}
        for node in graph.topological_order():
            last[node.layer] = node.id
        layer_rows = [(i, "-", last[i]) for i in sorted(last)]
    layers = []
    for index, kind, out_id in layer_rows:
        mine = [n for n in nodes if n.layer == index]
        layers.append(LayerCost(index, kind, shapes[out_id], sum(n.params for n in mine), sum(n.macs for n in mine)))
    return CostReport(graph.name, shapes[graph.INPUT], tuple(nodes), tuple(layers))


@dataclass(frozen=True)
class StageDelta:
    index: int
    baseline_kind: str
    variant_kind: str
    baseline_params: int
    variant_params: int
    baseline_macs: int
    variant_macs: int

    @property
    def d_params(self) -> int:
        return self.variant_params - self.baseline_params

    @property
    def d_macs(self) -> int:
        return self.variant_macs - self.baseline_macs


def percent_change(baseline: float, variant: float) -> float:
    d = variant - baseline
    if baseline == 0:
        return 0.0 if d == 0 else math.copysign(math.inf, d)
    return 100.0 * d / baseline


@dataclass(frozen=True)
class DeltaReport:
    baseline: CostReport
    variant: CostReport
    stages: tuple[StageDelta, ...]
    warning: str = ""

    @property
    def d_params(self) -> int:
        return self.variant.params - self.baseline.params

    @property
    def d_flops(self) -> int:
        return self.variant.flops - self.baseline.flops

    @property
    def pct_params(self) -> float:
        return percent_change(self.baseline.params, self.variant.params)

    @property
    def pct_flops(self) -> float:
        return percent_change(self.baseline.flops, self.variant.flops)

    @property
    def verdict(self) -> str:
        dp, df = self.d_params, self.d_flops
        if dp == 0 and df == 0:
            return "identical"
        if dp <= 0 and df <= 0:
            return "lighter"
        if dp >= 0 and df >= 0:
            return "heavier"
        return "mixed"

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.name,
            "variant": self.variant.name,
            "d_params": self.d_params,
            "pct_params": self.pct_params,
            "d_flops": self.d_flops,
            "pct_flops": self.pct_flops,
            "verdict": self.verdict,
            "warning": self.warning,
            "stages": [
                {
                    "layer": s.index,
                    "baseline_kind": s.baseline_kind,
                    "variant_kind": s.variant_kind,
                    "d_params": s.d_params,
                    "d_macs": s.d_macs,
                }
                for s in self.stages
            ],
            "totals": {"baseline": self.baseline.to_dict()["totals"], "variant": self.variant.to_dict()["totals"]},
        }


def diff_reports(a: CostReport, b: CostReport) -> DeltaReport:
    """Variant ``b`` minus baseline ``a``, with stages aligned by layer index.

    When the layer counts differ only the common prefix is compared and
    :attr:`DeltaReport.warning` says so.
    """
    n = min(len(a.layers), len(b.layers))
    stages = tuple(
        StageDelta(la.index, la.kind, lb.kind, la.params, lb.params, la.macs, lb.macs)
        for la, lb in zip(a.layers[:n], b.layers[:n])
    )
    warning = ""
    if len(a.layers) != len(b.layers):
        warning = f"stage counts differ ({len(a.layers)} vs {len(b.layers)}); aligned on the first {n} layers"
    return DeltaReport(a, b, stages, warning)


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape)


def totals_line(report: CostReport) -> str:
    return (
        f"total  params={report.params} ({fmt_fixed(report.params_m)}M)  "
        f"macs={report.macs}  flops={report.flops}  GFLOPs={fmt_fixed(report.gflops)}"
    )


def format_table(report: CostReport) -> str:
    rows = [("layer", "kind", "out_shape", "params", "macs")]
    rows += [(str(l.index), l.kind, _shape_str(l.out_shape), str(l.params), str(l.macs)) for l in report.layers]
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = [f"{report.name}  input={_shape_str(report.input_shape)}"]
    for r in rows:
        lines.append(
            "  ".join(v.ljust(w) if i < 3 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip()
        )
    lines.append(totals_line(report))
    return "\n".join(lines) + "\n"


def format_csv(report: CostReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "kind", "out_shape", "params", "macs"])
    for l in report.layers:
        writer.writerow([l.index, l.kind, _shape_str(l.out_shape), l.params, l.macs])
    return buf.getvalue()


def _pct_str(x: float) -> str:
    return f"{x:+.2f}%" if math.isfinite(x) else ("+inf%" if x > 0 else "-inf%")


def format_delta_table(delta: DeltaReport) -> str:
    a, b = delta.baseline, delta.variant
    lines = [
        f"baseline: {a.name}",
        f"  {totals_line(a)}",
        f"variant:  {b.name}",
        f"  {totals_line(b)}",
        "",
    ]
    rows = [("layer", "baseline", "variant", "d_params", "d_macs")]
    rows += [(str(s.index), s.baseline_kind, s.variant_kind, f"{s.d_params:+d}", f"{s.d_macs:+d}") for s in delta.stages]
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    for r in rows:
        lines.append(
            "  ".join(v.ljust(w) if i < 3 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip()
        )
    lines.append("")
    lines.append(f"delta params: {delta.d_params:+d} ({_pct_str(delta.pct_params)})")
    lines.append(f"delta flops:  {delta.d_flops:+d} ({_pct_str(delta.pct_flops)})")
    if delta.warning:
        lines.append(f"warning: {delta.warning}")
    lines.append(f"verdict: variant is {delta.verdict}" if delta.verdict != "identical" else "verdict: identical")
    return "\n".join(lines) + "\n"
