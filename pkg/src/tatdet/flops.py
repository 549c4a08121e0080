"""Static parameter and FLOPs accounting over a ``NetworkGraph``.

Convention (printed in every report header):
  * one multiply-accumulate = 2 FLOPs
  * conv: 2*Hout*Wout*Cout*(Cin/groups)*kh*kw, plus Hout*Wout*Cout for a bias
  * batch norm: 2 FLOPs/element, activation: 1 FLOP/element
  * elementwise add/mul: 1 FLOP/output element
  * resize, concat, slice, taps: uncounted
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .network import NetworkGraph
from .tensor import DimensionError

CONVENTION = (
    "FLOPs convention: 1 MAC = 2 FLOPs; conv bias 1/elem; BN 2/elem; activation 1/elem; "
    "add/mul 1/elem; resize/concat/slice uncounted"
)

# Baselines appear only as published numbers, not as runnable graphs.
TABLE5_BASELINES = (
    # label, flops per pixel, ICDAR2015 F-score
    ("PixelLink", 765.65e3, 83.7),
    ("EAST-VGG16", 310.62e3, 76.4),
    ("SegLink", 322.42e3, 75.0),
    ("IncepText", 278.53e3, 85.3),
    ("DDR", 64.34e3, 81.0),
    ("EAST-PVA", 13.23e3, 75.7),
)
TABLE5_OURS = (("Ours", 6.65e3, 81.5), ("Ours@1080P", 6.65e3, 85.4))
# (M, FRU, TAU, I, recall, precision, F, total FLOPs)
TABLE6_ROWS = (
    (False, False, False, False, 73.5, 83.6, 78.2, 23.85e9),
    (True, False, False, False, 73.7, 87.8, 80.1, 17.75e9),
    (True, True, False, False, 77.4, 83.6, 80.4, 5.79e9),
    (True, True, True, False, 77.2, 85.8, 81.3, 5.85e9),
    (True, True, True, True, 77.8, 85.8, 81.5, 6.03e9),
)


@dataclass
class NodeCost:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class FlopsReport:
    height: int
    width: int
    per_node: list[NodeCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.per_node)

    @property
    def total_flops(self) -> int:
        return sum(n.flops for n in self.per_node)

    @property
    def flops_per_pixel(self) -> float:
        return self.total_flops / (self.height * self.width)

    def by_prefix(self, depth: int = 1) -> dict[str, int]:
        """FLOPs grouped by the first ``depth`` dotted components of node names."""
        out: dict[str, int] = {}
        for n in self.per_node:
            key = ".".join(n.name.split(".")[:depth])
            out[key] = out.get(key, 0) + n.flops
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CONVENTION}\n# resolution {self.width}x{self.height}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["node", "kind", "params", "flops"])
        for n in self.per_node:
            wr.writerow([n.name, n.kind, n.params, n.flops])
        wr.writerow(["TOTAL", "", self.total_params, self.total_flops])
        return buf.getvalue()


def analyze(graph: NetworkGraph, h: int, w: int) -> FlopsReport:
    """Per-node parameters and FLOPs at input resolution h x w.

    Any resolution whose node shapes resolve is accepted (e.g. 1280x720,
    where the stride-16 maps are 45 rows tall); the executor itself still
    requires multiples of 32.
    """
    if h < 1 or w < 1:
        raise DimensionError(f"resolution {w}x{h} must be positive", axis="HW")
    shapes = graph.infer_shapes(h, w)
    report = FlopsReport(h, w)
    for node in graph.nodes:
        c, oh, ow = shapes[node.name]
        elems = c * oh * ow
        params = flops = 0
        k = node.kind
        if k == "conv":
            spec = node.attrs["spec"]
            kh, kw = spec.kernel
            params = spec.out_channels * (spec.in_channels // spec.groups) * kh * kw
            flops = 2 * oh * ow * spec.out_channels * (spec.in_channels // spec.groups) * kh * kw
            if node.attrs.get("bias"):
                params += spec.out_channels
                flops += elems
        elif k == "bn":
            params = 2 * c
            flops = 2 * elems
        elif k == "act":
            flops = elems
        elif k in ("add", "mul"):
            flops = elems
        report.per_node.append(NodeCost(node.name, k, params, flops))
    return report


@dataclass
class ComparisonRow:
    label: str
    flops_per_pixel: float
    f_score: float | None
    params: int | None
    total_flops: float | None = None


def compare(reports) -> list[ComparisonRow]:
    """Rows for (label, FlopsReport-or-None, f_score) entries.

    A fixture entry may pass a float (per-pixel FLOPs) in place of a report.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("compare needs at least one report")
    rows = []
    for label, rep, f in reports:
        if isinstance(rep, FlopsReport):
            rows.append(ComparisonRow(label, rep.flops_per_pixel, f, rep.total_params, rep.total_flops))
        else:
            rows.append(ComparisonRow(label, float(rep), f, None))
    return rows


def _fmt_si(v: float | None) -> str:
    if v is None:
        return "-"
    for unit, div in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(v) >= div:
            return f"{v / div:.2f}{unit}"
    return f"{v:.0f}"


def format_table(rows: list[ComparisonRow]) -> str:
    header = ("label", "FLOPs/px", "total", "params", "F")
    body = [
        (r.label, _fmt_si(r.flops_per_pixel), _fmt_si(r.total_flops), _fmt_si(r.params),
         "-" if r.f_score is None else f"{r.f_score:.1f}")
        for r in rows
    ]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    lines = [f"# {CONVENTION}"]
    lines.append("  ".join(h.ljust(wd) if i == 0 else h.rjust(wd) for i, (h, wd) in enumerate(zip(header, widths))))
    for row in body:
        lines.append("  ".join(c.ljust(wd) if i == 0 else c.rjust(wd) for i, (c, wd) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def plot_data_csv(rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["label", "flops_per_pixel", "f_score", "params"])
    for r in rows:
        wr.writerow([r.label, f"{r.flops_per_pixel:.2f}", "" if r.f_score is None else r.f_score,
                     "" if r.params is None else r.params])
    return buf.getvalue()


def format_report(report: FlopsReport, top: int | None = None) -> str:
    lines = [f"# {CONVENTION}", f"# resolution {report.width}x{report.height}"]
    nodes = report.per_node
    if top is not None:
        nodes = sorted(nodes, key=lambda n: -n.flops)[:top]
    width = max((len(n.name) for n in nodes), default=4)
    lines.append(f"{'node'.ljust(width)}  {'params':>10}  {'FLOPs':>14}")
    for n in nodes:
        lines.append(f"{n.name.ljust(width)}  {n.params:>10}  {n.flops:>14}")
    lines.append(f"{'TOTAL'.ljust(width)}  {report.total_params:>10}  {report.total_flops:>14}")
    lines.append(f"FLOPs/pixel: {report.flops_per_pixel:.2f}")
    return "\n".join(lines) + "\n"
