"""``backbone-lens`` command line: presets, analyze, diff, run, eval."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import arch, cost, metrics, refexec
from .errors import BackboneLensError


def _shape(text: str) -> tuple[int, int, int, int]:
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        dims = ()
    if len(dims) != 4 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"shape must be N,C,H,W with positive integers, got {text!r}")
    return dims  # type: ignore[return-value]


def _unit(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        v = float("nan")
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in [0, 1], got {text!r}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        v = -1
    if v < 0:
        raise argparse.ArgumentTypeError(f"seed must be a non-negative integer, got {text!r}")
    return v


def _model_source(parser: argparse.ArgumentParser, many: bool = False) -> None:
    action = "append" if many else "store"
    parser.add_argument("--preset", dest="models", action=action, type=lambda v: ("preset", v),
                        help="built-in preset name")
    parser.add_argument("--spec", dest="models", action=action, type=lambda v: ("spec", v),
                        help="path to a JSON model spec")


def _load(source: tuple[str, str]) -> arch.ModelSpec:
    kind, value = source
    return arch.builtin_preset(value) if kind == "preset" else arch.load_model_spec(value)


def _emit(text: str, args, out) -> None:
    if getattr(args, "output", None):
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        out.write(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def cmd_presets(args, out) -> int:
    specs = [arch.builtin_preset(name) for name in arch.PRESET_NAMES]
    if args.format == "json":
        listing = [
            {"name": s.name, "description": s.description, "depth_multiple": s.depth_multiple,
             "width_multiple": s.width_multiple, "layers": arch.describe_layers(s)}
            for s in specs
        ]
        _emit(_dump_json(listing), args, out)
        return 0
    lines = []
    for s in specs:
        lines.append(f"{s.name}: {s.description}")
        lines.append(f"  depth_multiple={s.depth_multiple} width_multiple={s.width_multiple}")
        lines.append(f"  {'layer':<6}{'from':<8}{'n':<4}{'kind':<12}args")
        for row in arch.describe_layers(s):
            shown = {k: v for k, v in row["args"].items() if v not in (None, [])}
            args_txt = " ".join(f"{k}={v}" for k, v in shown.items())
            lines.append(f"  {row['index']:<6}{str(row['from']):<8}{row['repeats']:<4}{row['kind']:<12}{args_txt}".rstrip())
        lines.append("")
    _emit("\n".join(lines), args, out)
    return 0


def _analyze(source, shape) -> cost.CostReport:
    return cost.count_flops(arch.build_graph(_load(source)), shape)


def cmd_analyze(args, out) -> int:
    report = _analyze(args.models, args.shape)
    if args.format == "json":
        text = _dump_json(report.to_dict())
    elif args.format == "csv":
        text = cost.format_csv(report)
    else:
        text = cost.format_table(report)
    _emit(text, args, out)
    return 0


def cmd_diff(args, out) -> int:
    if not args.models or len(args.models) != 2:
        raise BackboneLensError("diff needs exactly two models (--preset/--spec, baseline first)")
    reports = []
    for side, source in zip(("baseline", "variant"), args.models):
        try:
            reports.append(_analyze(source, args.shape))
        except (BackboneLensError, OSError, ValueError) as exc:
            raise BackboneLensError(f"{side} ({source[1]}): {exc}") from exc
    delta = cost.diff_reports(*reports)
    if args.format == "json":
        text = _dump_json(delta.to_dict())
    else:
        text = cost.format_delta_table(delta)
    _emit(text, args, out)
    return 0


def cmd_run(args, out) -> int:
    graph = arch.build_graph(_load(args.models))
    if args.input:
        x = refexec.read_tensor(args.input)
    elif args.shape:
        x = np.random.default_rng(args.seed).uniform(-1.0, 1.0, size=args.shape)
    else:
        raise BackboneLensError("run needs --input <tensor file> or --shape N,C,H,W")
    weights = refexec.init_weights(graph, args.seed)
    outputs, trace = refexec.run_graph(graph, weights, x)
    files = []
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        layer_of = {info.output: info.index for info in graph.layers}
        for ref, y in zip(graph.outputs, outputs):
            path = os.path.join(args.out_dir, f"layer{layer_of[ref]}.tensor")
            refexec.write_tensor(path, y)
            files.append(path)
    if args.format == "json":
        text = _dump_json({
            "multiplies": trace.multiplies,
            "outputs": [{"node": ref[0], "shape": list(y.shape)} for ref, y in zip(graph.outputs, outputs)],
            "files": files,
            "shapes": {k: list(v) for k, v in trace.shapes.items()},
        })
    else:
        width = max(len(k) for k in trace.shapes)
        lines = [f"{'node':<{width}}  shape"]
        lines += [f"{k:<{width}}  {'x'.join(map(str, v))}" for k, v in trace.shapes.items()]
        lines.append("")
        for ref, y in zip(graph.outputs, outputs):
            lines.append(f"output {ref[0]}: {'x'.join(map(str, y.shape))}")
        lines += [f"wrote {p}" for p in files]
        lines.append(f"multiplies: {trace.multiplies}")
        text = "\n".join(lines) + "\n"
    _emit(text, args, out)
    return 0


def cmd_eval(args, out) -> int:
    names = metrics.read_class_names(args.names)
    dets = metrics.read_detections_csv(args.dets)
    gts = metrics.read_ground_truth_csv(args.gts)
    report = metrics.eval_report(dets, gts, names, args.iou, args.conf)
    table = metrics.format_report_table(report)
    as_json = _dump_json(report.to_dict())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for fname, text in (
            ("report.txt", table),
            ("report.json", as_json),
            ("pr_curve.csv", metrics.pr_curve_csv(report)),
            ("confusion.csv", metrics.confusion_csv(report)),
        ):
            with open(os.path.join(args.out_dir, fname), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
    _emit(as_json if args.format == "json" else table, args, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backbone-lens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("presets", help="list built-in backbone presets")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")

    p = sub.add_parser("analyze", help="per-layer params/MACs and totals")
    _model_source(p)
    p.add_argument("--shape", type=_shape, default=(1, 3, 640, 640))
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--output")

    p = sub.add_parser("diff", help="compare two models (baseline first)")
    _model_source(p, many=True)
    p.add_argument("--shape", type=_shape, default=(1, 3, 640, 640))
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")

    p = sub.add_parser("run", help="execute a model on a tensor with seeded weights")
    _model_source(p)
    p.add_argument("--input", help="tensor file (N C H W header, then values)")
    p.add_argument("--shape", type=_shape, help="random input of this shape when --input is not given")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--dets", required=True, help="detections CSV")
    p.add_argument("--gts", required=True, help="ground-truth CSV")
    p.add_argument("--names", required=True, help="class names, one per line")
    p.add_argument("--iou", type=_unit, default=0.5)
    p.add_argument("--conf", type=_unit, default=0.25)
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("analyze", "run") and args.models is None:
        parser.error(f"{args.command} needs --preset or --spec")
    try:
        if args.command == "presets":
            return cmd_presets(args, out)
        if args.command == "analyze":
            return cmd_analyze(args, out)
        if args.command == "diff":
            return cmd_diff(args, out)
        if args.command == "run":
            return cmd_run(args, out)
        return cmd_eval(args, out)
    except (BackboneLensError, OSError, ValueError) as exc:
        err.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
