"""Deterministic float64 reference executor for primitive graphs.

Convolution is direct: for every kernel tap (row-major) and then every input
channel, the shifted input plane is multiplied by the tap weight and
accumulated.  No im2col or FFT.  Each multiply actually performed is counted
in the :class:`ExecTrace`, so the count is an observation and not a formula.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .arch import PrimitiveGraph
from .cost import check_shape, conv_out_shape
from .errors import NodeError, ShapeError


@dataclass
class ExecTrace:
    multiplies: int = 0
    shapes: dict = field(default_factory=dict)

    def count(self, n: int) -> None:
        self.multiplies += int(n)


@dataclass(frozen=True)
class WeightStore:
    """Kernels ``(out, in/groups, k, k)`` plus folded-norm scale and shift per conv node."""

    kernels: dict
    scales: dict
    shifts: dict

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.kernels

    def equals(self, other: "WeightStore") -> bool:
        if self.kernels.keys() != other.kernels.keys():
            return False
        return all(
            np.array_equal(self.kernels[k], other.kernels[k])
            and np.array_equal(self.scales[k], other.scales[k])
            and np.array_equal(self.shifts[k], other.shifts[k])
            for k in self.kernels
        )


def _as_tensor(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected an NCHW tensor, got shape {x.shape}")
    check_shape(tuple(int(s) for s in x.shape))
    return x


def conv2d_direct(x, weight, scale=None, shift=None, stride=1, padding=0, groups=1, trace=None) -> np.ndarray:
    """Zero-padded direct convolution followed by a per-channel affine.

    Args:
        x: input ``(N, C, H, W)``.
        weight: kernel ``(out_ch, C // groups, k, k)``.
        scale, shift: per-output-channel folded norm, defaults 1 and 0.
        trace: optional :class:`ExecTrace` that receives the multiply count.
    """
    x = _as_tensor(x)
    weight = np.asarray(weight, dtype=np.float64)
    n, c, h, w = x.shape
    out_ch, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"non-square kernel {weight.shape}")
    if c != cin_g * groups or out_ch % groups:
        raise ShapeError(f"channel mismatch: input has {c} channels, kernel {weight.shape} with groups={groups}")
    oh, ow = conv_out_shape(h, w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, out_ch, oh, ow))
    cout_g = out_ch // groups
    for g in range(groups):
        o = slice(g * cout_g, (g + 1) * cout_g)
        for i in range(k):
            for j in range(k):
                window = xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
                for ci in range(cin_g):
                    prod = weight[o, ci, i, j][None, :, None, None] * window[:, None, g * cin_g + ci]
                    out[:, o] += prod
                    if trace is not None:
                        trace.count(prod.size)
    if scale is not None:
        out *= np.asarray(scale, dtype=np.float64)[None, :, None, None]
    if shift is not None:
        out += np.asarray(shift, dtype=np.float64)[None, :, None, None]
    return out


def act_silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def maxpool2d(x, kernel, stride=1, padding=0) -> np.ndarray:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = conv_out_shape(h, w, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    out = np.full((n, c, oh, ow), -np.inf)
    for i in range(kernel):
        for j in range(kernel):
            np.maximum(out, xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride], out=out)
    return out


def split_c(x, parts: int = 2) -> tuple[np.ndarray, ...]:
    x = _as_tensor(x)
    if x.shape[1] % parts:
        raise ShapeError(f"cannot split {x.shape[1]} channels into {parts} equal parts")
    return tuple(np.split(x, parts, axis=1))


def concat_c(xs) -> np.ndarray:
    xs = [_as_tensor(x) for x in xs]
    first = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (first[0], first[2], first[3]):
            raise ShapeError(f"concat inputs disagree outside the channel axis: {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=1)


def add(a, b) -> np.ndarray:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add inputs have different shapes: {a.shape} vs {b.shape}")
    return a + b


def upsample2x(x) -> np.ndarray:
    x = _as_tensor(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _node_rng(seed: int, node_id: str) -> np.random.Generator:
    # keyed by node id so the draw does not depend on node order
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(node_id.encode("utf-8"))]))


def init_weights(graph: PrimitiveGraph, seed: int = 0) -> WeightStore:
    """Uniform kernels in [-0.1, 0.1], scale 1, shift 0, one entry per conv2d node."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    kernels, scales, shifts = {}, {}, {}
    for node in graph.conv_nodes():
        p = node.params
        shape = (p["out_ch"], p["in_ch"] // p["groups"], p["kernel"], p["kernel"])
        kernels[node.id] = _node_rng(seed, node.id).uniform(-0.1, 0.1, size=shape)
        scales[node.id] = np.ones(p["out_ch"])
        shifts[node.id] = np.zeros(p["out_ch"])
    return WeightStore(kernels, scales, shifts)


def run_graph(graph: PrimitiveGraph, weights: WeightStore, x, trace: ExecTrace | None = None):
    """Execute ``graph`` on ``x`` in topological order.

    Returns:
        ``(outputs, trace)`` where ``outputs`` follows ``graph.outputs``.

    Raises:
        NodeError: wrapping the failure of a specific node.
    """
    x = _as_tensor(x)
    trace = trace if trace is not None else ExecTrace()
    values: dict = {graph.INPUT: (x,)}
    trace.shapes[graph.INPUT] = tuple(x.shape)
    for node in graph.topological_order():
        ins = [values[src][port] for src, port in node.inputs]
        p = node.params
        try:
            if node.kind == "conv2d":
                if node.id not in weights:
                    raise KeyError(f"no weights for conv node {node.id!r}")
                kern = weights.kernels[node.id]
                if kern.shape != (p["out_ch"], p["in_ch"] // p["groups"], p["kernel"], p["kernel"]):
                    raise ShapeError(f"weight shape {kern.shape} does not match node params")
                if ins[0].shape[1] != p["in_ch"]:
                    raise ShapeError(f"conv expects {p['in_ch']} input channels, got {ins[0].shape[1]}")
                out = (conv2d_direct(ins[0], kern, weights.scales[node.id], weights.shifts[node.id],
                                     p["stride"], p["padding"], p["groups"], trace),)
            elif node.kind == "act_silu":
                out = (act_silu(ins[0]),)
            elif node.kind == "maxpool2d":
                out = (maxpool2d(ins[0], p["kernel"], p["stride"], p["padding"]),)
            elif node.kind == "split_c":
                out = split_c(ins[0], p.get("parts", 2))
            elif node.kind == "concat_c":
                out = (concat_c(ins),)
            elif node.kind == "add":
                out = (add(*ins),)
            elif node.kind == "upsample2x":
                out = (upsample2x(ins[0]),)
            elif node.kind == "fusion_stub":
                out = (ins[0],)
            else:
                raise ValueError(f"unknown primitive {node.kind!r}")
        except (ShapeError, KeyError, ValueError) as exc:
            raise NodeError(node.id, exc) from exc
        values[node.id] = out
        trace.shapes[node.id] = tuple(out[0].shape)
    return [values[src][port] for src, port in graph.outputs], trace


def region_text_scores(obj_emb, txt_emb) -> np.ndarray:
    """``sigmoid(obj @ txt.T / sqrt(D))``: a (K, C) region-to-text score matrix."""
    obj = np.asarray(obj_emb, dtype=np.float64)
    txt = np.asarray(txt_emb, dtype=np.float64)
    if obj.ndim != 2 or txt.ndim != 2 or obj.shape[1] != txt.shape[1]:
        raise ShapeError(f"embedding dimension mismatch: {obj.shape} vs {txt.shape}")
    if not (np.isfinite(obj).all() and np.isfinite(txt).all()):
        raise ValueError("embeddings must be finite")
    return expit(obj @ txt.T / np.sqrt(obj.shape[1]))


# --------------------------------------------------------------------------
# text file formats
# --------------------------------------------------------------------------


def _parse_header(line: str, n: int, what: str) -> tuple[int, ...]:
    parts = line.split()
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != n or any(d < 1 for d in dims):
        raise ValueError(f"malformed {what} header {line.strip()!r}: expected {n} positive integers")
    return dims


def _parse_values(rest: str, count: int, what: str) -> np.ndarray:
    tokens = rest.split()
    if len(tokens) != count:
        raise ValueError(f"{what} declares {count} values but contains {len(tokens)}")
    try:
        return np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"malformed {what} value: {exc}") from exc


def loads_tensor(text: str) -> np.ndarray:
    header, _, rest = text.partition("\n")
    shape = _parse_header(header, 4, "tensor")
    return _parse_values(rest, int(np.prod(shape)), "tensor").reshape(shape)


def dumps_tensor(x) -> str:
    """``"N C H W"`` header, then one line per W-row of shortest-repr floats."""
    x = _as_tensor(x)
    lines = [" ".join(str(d) for d in x.shape)]
    for row in x.reshape(-1, x.shape[3]):
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def read_tensor(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        return loads_tensor(fh.read())


def write_tensor(path, x) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_tensor(x))


def loads_matrix(text: str) -> np.ndarray:
    header, _, rest = text.partition("\n")
    shape = _parse_header(header, 2, "matrix")
    return _parse_values(rest, shape[0] * shape[1], "matrix").reshape(shape)


def dumps_matrix(m) -> str:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.shape}")
    lines = [f"{m.shape[0]} {m.shape[1]}"] + [" ".join(repr(float(v)) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def read_matrix(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        return loads_matrix(fh.read())
