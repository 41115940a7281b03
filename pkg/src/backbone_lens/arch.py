"""Declarative backbone specs and their lowering to primitive compute graphs.

A :class:`ModelSpec` is a YOLO-style layer list (``from``, ``repeats``, ``kind``,
``args``) carrying depth and width multiples.  :func:`apply_scaling` folds the
multiples into the layers, and :func:`expand` lowers the composite blocks
(C2f, C3k, C3k2, SPPF, ...) into a :class:`PrimitiveGraph` of conv2d, act_silu,
split_c, concat_c, add, maxpool2d, upsample2x and fusion_stub nodes.

Node ids are ``<layer index>.<suffix path>`` (``"2.m.0.cv1"``), so two
expansions with the same structure share ids even when the composite kind
differs.  The reference executor keys its weights by these ids.
"""

from __future__ import annotations

import graphlib
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from typing import Any, Callable, ClassVar

from .errors import GraphError, SpecError

KINDS = ("Conv", "Bottleneck", "C2f", "C3k", "C3k2", "SPPF", "Upsample", "Concat", "FusionStub")

PRIMITIVES = (
    "conv2d",
    "act_silu",
    "split_c",
    "concat_c",
    "add",
    "maxpool2d",
    "upsample2x",
    "fusion_stub",
)

# None marks a required argument.
ARG_DEFAULTS: dict[str, dict[str, Any]] = {
    "Conv": {"out_channels": None, "kernel": 1, "stride": 1, "groups": 1},
    "Bottleneck": {"out_channels": None, "shortcut": True, "e": 0.5, "kernel": 3},
    "C2f": {"out_channels": None, "shortcut": False, "e": 0.5},
    "C3k": {"out_channels": None, "shortcut": True, "e": 0.5, "kernel": 3},
    "C3k2": {"out_channels": None, "shortcut": True, "e": 0.5, "c3k": False, "c3k_repeats": 2},
    "SPPF": {"out_channels": None, "kernel": 5},
    "Upsample": {},
    "Concat": {},
    "FusionStub": {"embed_dim": None, "classes": []},
}
_OPTIONAL_NONE = {("FusionStub", "embed_dim")}
_SINGLE_SHOT = {"SPPF", "Upsample", "Concat", "FusionStub"}
_INT_ARGS = {"out_channels", "kernel", "stride", "groups", "c3k_repeats", "embed_dim"}
_BOOL_ARGS = {"shortcut", "c3k"}

PRESET_NAMES = ("yoloworld-c2f-n", "yoloworld-c3k2-n")


@dataclass(frozen=True)
class LayerSpec:
    """One row of the layer list.

    ``inputs`` holds the raw ``from`` entries: ``-1`` is the previous layer (or
    the image for layer 0), other negatives are relative, non-negatives are
    absolute layer indices.
    """

    index: int
    inputs: tuple[int, ...]
    repeats: int
    kind: str
    args: dict = field(default_factory=dict)

    def resolved_inputs(self) -> list[int]:
        """Absolute source indices; ``-1`` stands for the graph input."""
        return [self.index + f if f < 0 else f for f in self.inputs]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    depth_multiple: float
    width_multiple: float
    layers: tuple[LayerSpec, ...]
    in_channels: int = 3
    outputs: tuple[int, ...] = ()
    description: str = ""

    @property
    def output_layers(self) -> tuple[int, ...]:
        return self.outputs or (len(self.layers) - 1,)

    @property
    def backbone_layers(self) -> tuple[LayerSpec, ...]:
        """Layers excluding the terminal fusion boundary marker."""
        return tuple(layer for layer in self.layers if layer.kind != "FusionStub")

    @property
    def is_scaled(self) -> bool:
        return self.depth_multiple == 1.0 and self.width_multiple == 1.0


Ref = tuple[str, int]


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple[Ref, ...]
    params: dict
    layer: int

    @property
    def num_outputs(self) -> int:
        return self.params.get("parts", 2) if self.kind == "split_c" else 1


@dataclass(frozen=True)
class LayerInfo:
    index: int
    kind: str
    output: Ref
    channels: int


@dataclass(frozen=True)
class PrimitiveGraph:
    nodes: tuple[Node, ...]
    outputs: tuple[Ref, ...]
    name: str = ""
    in_channels: int = 3
    layers: tuple[LayerInfo, ...] = ()

    INPUT: ClassVar[str] = "input"

    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def conv_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "conv2d"]

    def topological_order(self) -> list[Node]:
        """Nodes in dependency order; raises :class:`GraphError` on a bad graph."""
        errors = validate(self)
        if errors:
            raise GraphError("; ".join(errors))
        by_id = self.node_map()
        ts: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
        for n in self.nodes:
            ts.add(n.id, *(src for src, _ in n.inputs if src != self.INPUT))
        return [by_id[i] for i in ts.static_order()]


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _normalize_args(kind: str, raw: dict, where: str) -> dict:
    defaults = ARG_DEFAULTS[kind]
    if not isinstance(raw, dict):
        raise SpecError(f"{where}: args must be an object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise SpecError(f"{where}: unknown args for {kind}: {', '.join(unknown)}")
    args = {}
    for key, default in defaults.items():
        value = raw.get(key, default)
        if value is None and (kind, key) not in _OPTIONAL_NONE:
            raise SpecError(f"{where}: {kind} requires {key!r}")
        if value is not None and key in _INT_ARGS:
            if not _is_int(value) or value < 1:
                raise SpecError(f"{where}: {key} must be a positive integer, got {value!r}")
        if key in _BOOL_ARGS and not isinstance(value, bool):
            raise SpecError(f"{where}: {key} must be true/false, got {value!r}")
        if key == "e" and (not _is_number(value) or value <= 0):
            raise SpecError(f"{where}: e must be a positive number, got {value!r}")
        if key == "classes":
            if not isinstance(value, list) or not all(isinstance(c, str) for c in value):
                raise SpecError(f"{where}: classes must be a list of strings")
            value = list(value)
        args[key] = value
    return args


def _layer_from_dict(i: int, raw: Any) -> LayerSpec:
    where = f"layer {i}"
    if not isinstance(raw, dict):
        raise SpecError(f"{where}: expected an object")
    unknown = sorted(set(raw) - {"index", "from", "repeats", "kind", "args"})
    if unknown:
        raise SpecError(f"{where}: unknown fields {', '.join(unknown)}")
    if "index" in raw and raw["index"] != i:
        raise SpecError(f"{where}: index field {raw['index']!r} does not match position")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise SpecError(f"{where}: unknown layer kind {kind!r}")
    src = raw.get("from", [-1])
    if _is_int(src):
        src = [src]
    if not isinstance(src, list) or not src or not all(_is_int(s) for s in src):
        raise SpecError(f"{where}: 'from' must be an integer or a non-empty list of integers")
    repeats = raw.get("repeats", 1)
    if not _is_int(repeats) or repeats < 1:
        raise SpecError(f"{where}: repeats must be a positive integer, got {repeats!r}")
    if kind in _SINGLE_SHOT and repeats != 1:
        raise SpecError(f"{where}: {kind} does not support repeats > 1")
    layer = LayerSpec(i, tuple(src), repeats, kind, _normalize_args(kind, raw.get("args", {}), where))
    for f in layer.resolved_inputs():
        if f < -1 or f >= i:
            raise SpecError(f"{where}: unresolvable reference {f} in 'from' {list(src)}")
    if kind == "Concat":
        if len(src) < 2:
            raise SpecError(f"{where}: Concat needs at least 2 inputs")
    elif len(src) != 1:
        raise SpecError(f"{where}: {kind} takes exactly 1 input, got {len(src)}")
    return layer


def model_spec_from_dict(data: Any) -> ModelSpec:
    if not isinstance(data, dict):
        raise SpecError("top level must be an object")
    unknown = sorted(
        set(data)
        - {"name", "depth_multiple", "width_multiple", "layers", "in_channels", "outputs", "description"}
    )
    if unknown:
        raise SpecError(f"unknown top-level fields {', '.join(unknown)}")
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise SpecError("'name' must be a non-empty string")
    mults = {}
    for key in ("depth_multiple", "width_multiple"):
        v = data.get(key, 1.0)
        if not _is_number(v) or not math.isfinite(v) or v <= 0:
            raise SpecError(f"{key} must be a positive number, got {v!r}")
        mults[key] = float(v)
    in_channels = data.get("in_channels", 3)
    if not _is_int(in_channels) or in_channels < 1:
        raise SpecError(f"in_channels must be a positive integer, got {in_channels!r}")
    raw_layers = data.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SpecError("'layers' must be a non-empty list")
    layers = tuple(_layer_from_dict(i, raw) for i, raw in enumerate(raw_layers))
    outputs = data.get("outputs", [])
    if not isinstance(outputs, list) or not all(_is_int(o) for o in outputs):
        raise SpecError("'outputs' must be a list of layer indices")
    for o in outputs:
        if not 0 <= o < len(layers):
            raise SpecError(f"unresolvable reference {o} in 'outputs'")
    description = data.get("description", "")
    if not isinstance(description, str):
        raise SpecError("'description' must be a string")
    return ModelSpec(
        name,
        mults["depth_multiple"],
        mults["width_multiple"],
        layers,
        in_channels=in_channels,
        outputs=tuple(outputs),
        description=description,
    )


def parse_model_spec(text: str) -> ModelSpec:
    """Parse and validate JSON model-spec text.

    Raises:
        SpecError: on a JSON syntax error, an unknown layer kind, an
            unresolvable ``from`` reference or a non-positive multiple.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"syntax error: {exc}") from exc
    return model_spec_from_dict(data)


def model_spec_to_dict(spec: ModelSpec) -> dict:
    out: dict[str, Any] = {"name": spec.name}
    if spec.description:
        out["description"] = spec.description
    out["depth_multiple"] = spec.depth_multiple
    out["width_multiple"] = spec.width_multiple
    out["in_channels"] = spec.in_channels
    if spec.outputs:
        out["outputs"] = list(spec.outputs)
    out["layers"] = [
        {"from": list(layer.inputs), "repeats": layer.repeats, "kind": layer.kind, "args": dict(layer.args)}
        for layer in spec.layers
    ]
    return out


def dump_model_spec(spec: ModelSpec) -> str:
    return json.dumps(model_spec_to_dict(spec), indent=2) + "\n"


def load_model_spec(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_model_spec(fh.read())


def builtin_preset(name: str) -> ModelSpec:
    """Load one of the shipped backbone presets (see :data:`PRESET_NAMES`)."""
    if name not in PRESET_NAMES:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    text = resources.files("backbone_lens.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return parse_model_spec(text)


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def make_divisible(c, divisor: int = 8) -> int:
    """Smallest multiple of ``divisor`` that is >= ``c``."""
    c = Fraction(c)
    if c <= 0:
        raise ValueError(f"channel count must be positive, got {c}")
    return math.ceil(c / divisor) * divisor


def apply_scaling(spec: ModelSpec) -> ModelSpec:
    """Fold depth/width multiples into repeats and channel counts.

    Multiples are read through their decimal repr so ``1024 * 0.25`` is exact.
    """
    depth = Fraction(repr(spec.depth_multiple))
    width = Fraction(repr(spec.width_multiple))
    layers = []
    for layer in spec.layers:
        repeats = max(_round_half_up(layer.repeats * depth), 1)
        args = dict(layer.args)
        if "out_channels" in args:
            args["out_channels"] = make_divisible(args["out_channels"] * width)
        layers.append(replace(layer, repeats=repeats, args=args))
    return replace(spec, depth_multiple=1.0, width_multiple=1.0, layers=tuple(layers))


# --------------------------------------------------------------------------
# lowering
# --------------------------------------------------------------------------


def _hidden(c: int, e: float) -> int:
    return max(_round_half_up(c * Fraction(repr(float(e)))), 1)


class _Lowering:
    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def emit(self, node_id: str, kind: str, inputs, layer: int, **params) -> Ref:
        self.nodes.append(Node(node_id, kind, tuple(inputs), params, layer))
        return (node_id, 0)

    def conv(self, path, x, c_in, c_out, k, s, layer, groups=1) -> Ref:
        if c_in % groups or c_out % groups:
            raise GraphError(f"{path}: channels {c_in}->{c_out} not divisible by groups={groups}")
        ref = self.emit(
            path, "conv2d", [x], layer,
            in_ch=c_in, out_ch=c_out, kernel=k, stride=s, padding=k // 2, groups=groups,
        )
        return self.emit(f"{path}.act", "act_silu", [ref], layer)

    def bottleneck(self, path, x, c_in, c_out, shortcut, e, k, layer) -> Ref:
        if shortcut and c_in != c_out:
            raise GraphError(f"{path}: shortcut requires matching channels, got {c_in} -> {c_out}")
        c_hidden = _hidden(c_out, e)
        y = self.conv(f"{path}.cv1", x, c_in, c_hidden, k, 1, layer)
        y = self.conv(f"{path}.cv2", y, c_hidden, c_out, k, 1, layer)
        if shortcut:
            y = self.emit(f"{path}.add", "add", [x, y], layer)
        return y

    def c3k(self, path, x, c_in, c_out, n, shortcut, e, k, layer) -> Ref:
        c_h = _hidden(c_out, e)
        a = self.conv(f"{path}.cv1", x, c_in, c_h, 1, 1, layer)
        b = self.conv(f"{path}.cv2", x, c_in, c_h, 1, 1, layer)
        for i in range(n):
            a = self.bottleneck(f"{path}.m.{i}", a, c_h, c_h, shortcut, 1.0, k, layer)
        cat = self.emit(f"{path}.cat", "concat_c", [a, b], layer)
        return self.conv(f"{path}.cv3", cat, 2 * c_h, c_out, 1, 1, layer)

    def split_block(self, path, x, c_in, c_out, n, e, layer, inner: Callable[[str, Ref, int], Ref]) -> Ref:
        c_h = _hidden(c_out, e)
        y = self.conv(f"{path}.cv1", x, c_in, 2 * c_h, 1, 1, layer)
        split_id, _ = self.emit(f"{path}.split", "split_c", [y], layer, parts=2)
        branches = [(split_id, 0), (split_id, 1)]
        for i in range(n):
            branches.append(inner(f"{path}.m.{i}", branches[-1], c_h))
        cat = self.emit(f"{path}.cat", "concat_c", branches, layer)
        return self.conv(f"{path}.cv2", cat, (2 + n) * c_h, c_out, 1, 1, layer)

    def sppf(self, path, x, c_in, c_out, k, layer) -> Ref:
        c_h = max(c_in // 2, 1)
        y = self.conv(f"{path}.cv1", x, c_in, c_h, 1, 1, layer)
        stages = [y]
        for i in range(3):
            stages.append(self.emit(f"{path}.pool.{i}", "maxpool2d", [stages[-1]], layer,
                                    kernel=k, stride=1, padding=k // 2))
        cat = self.emit(f"{path}.cat", "concat_c", stages, layer)
        return self.conv(f"{path}.cv2", cat, 4 * c_h, c_out, 1, 1, layer)


def _lower_layer(low: _Lowering, layer: LayerSpec, xs: list[Ref], chans: list[int]) -> tuple[Ref, int]:
    a, L, n = layer.args, layer.index, layer.repeats
    kind = layer.kind
    if kind == "Concat":
        return low.emit(f"{L}.cat", "concat_c", xs, L), sum(chans)
    x, c_in = xs[0], chans[0]
    if kind == "Upsample":
        return low.emit(f"{L}.up", "upsample2x", [x], L), c_in
    if kind == "FusionStub":
        return low.emit(f"{L}.fusion", "fusion_stub", [x], L,
                        embed_dim=a["embed_dim"], classes=tuple(a["classes"])), c_in
    c = a["out_channels"]
    if kind == "Conv":
        for i in range(n):
            path = f"{L}.conv" if n == 1 else f"{L}.{i}.conv"
            stride = a["stride"] if i == 0 else 1
            x = low.conv(path, x, c_in if i == 0 else c, c, a["kernel"], stride, L, a["groups"])
        return x, c
    if kind == "Bottleneck":
        for i in range(n):
            path = f"{L}" if n == 1 else f"{L}.{i}"
            x = low.bottleneck(path, x, c_in if i == 0 else c, c, a["shortcut"], a["e"], a["kernel"], L)
        return x, c
    if kind == "C2f":
        def inner(path, y, c_h):
            return low.bottleneck(path, y, c_h, c_h, a["shortcut"], 1.0, 3, L)
        return low.split_block(f"{L}", x, c_in, c, n, a["e"], L, inner), c
    if kind == "C3k2":
        def inner(path, y, c_h):
            if a["c3k"]:
                return low.c3k(path, y, c_h, c_h, a["c3k_repeats"], a["shortcut"], 0.5, 3, L)
            return low.bottleneck(path, y, c_h, c_h, a["shortcut"], 1.0, 3, L)
        return low.split_block(f"{L}", x, c_in, c, n, a["e"], L, inner), c
    if kind == "C3k":
        return low.c3k(f"{L}", x, c_in, c, n, a["shortcut"], a["e"], a["kernel"], L), c
    if kind == "SPPF":
        return low.sppf(f"{L}", x, c_in, c, a["kernel"], L), c
    raise SpecError(f"layer {L}: unknown layer kind {kind!r}")  # pragma: no cover


def expand(spec: ModelSpec) -> PrimitiveGraph:
    """Lower a scaled spec into a primitive graph.

    Raises:
        SpecError: if the spec still carries multiples other than 1.0.
        GraphError: for a shortcut between mismatched channel counts.
    """
    if not spec.is_scaled:
        raise SpecError("expand needs a scaled spec (multiples 1.0); call apply_scaling first")
    low = _Lowering()
    outs: list[Ref] = []
    chans: list[int] = []
    infos = []
    for layer in spec.layers:
        srcs = layer.resolved_inputs()
        xs = [(PrimitiveGraph.INPUT, 0) if s == -1 else outs[s] for s in srcs]
        cs = [spec.in_channels if s == -1 else chans[s] for s in srcs]
        ref, c = _lower_layer(low, layer, xs, cs)
        outs.append(ref)
        chans.append(c)
        infos.append(LayerInfo(layer.index, layer.kind, ref, c))
    return PrimitiveGraph(
        nodes=tuple(low.nodes),
        outputs=tuple(outs[i] for i in spec.output_layers),
        name=spec.name,
        in_channels=spec.in_channels,
        layers=tuple(infos),
    )


def build_graph(spec: ModelSpec) -> PrimitiveGraph:
    """``expand(apply_scaling(spec))``."""
    return expand(apply_scaling(spec))


_CONV_KEYS = ("in_ch", "out_ch", "kernel", "stride", "padding", "groups")


def validate(graph: PrimitiveGraph) -> list[str]:
    """Check reference integrity and acyclicity. Returns a list of error messages (empty when ok).

    Channel compatibility is left to shape inference.
    """
    errors: list[str] = []
    by_id: dict[str, Node] = {}
    for n in graph.nodes:
        if n.id == graph.INPUT:
            errors.append(f"node id {n.id!r} is reserved for the graph input")
        elif n.id in by_id:
            errors.append(f"duplicate node id {n.id!r}")
        by_id[n.id] = n
        if n.kind not in PRIMITIVES:
            errors.append(f"node {n.id!r}: unknown primitive {n.kind!r}")
        if n.kind == "conv2d":
            missing = [k for k in _CONV_KEYS if k not in n.params]
            if missing:
                errors.append(f"node {n.id!r}: conv2d missing {', '.join(missing)}")

    def check_ref(owner: str, ref: Ref) -> None:
        src, port = ref
        if src == graph.INPUT:
            if port != 0:
                errors.append(f"{owner}: graph input has no port {port}")
            return
        if src not in by_id:
            errors.append(f"{owner}: dangling reference to {src!r}")
        elif not 0 <= port < by_id[src].num_outputs:
            errors.append(f"{owner}: node {src!r} has no output port {port}")

    for n in graph.nodes:
        for ref in n.inputs:
            check_ref(f"node {n.id!r}", ref)
    for ref in graph.outputs:
        check_ref("graph outputs", ref)

    ts: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for n in graph.nodes:
        ts.add(n.id, *(src for src, _ in n.inputs if src in by_id))
    try:
        ts.prepare()
    except graphlib.CycleError as exc:
        errors.append(f"cycle detected: {' -> '.join(exc.args[1])}")
    return errors


def describe_layers(spec: ModelSpec) -> list[dict]:
    """Stage table rows for listings: index, from, repeats, kind, args."""
    return [
        {"index": l.index, "from": list(l.inputs), "repeats": l.repeats, "kind": l.kind, "args": dict(l.args)}
        for l in spec.layers
    ]
