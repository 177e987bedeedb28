"""Lower a trained network into a DAG of primitive raster operations and run it.

The op vocabulary mirrors what a cloud raster engine exposes: per-band 3x3
convolution, per-pixel arithmetic, band selection/stacking, block-max
reduction and bilinear resampling.  In ``faithful`` mode every multi-channel
convolution is expanded into single-band convolutions summed in input-channel
order, so the engine never needs a tensor convolution.  ``fused`` mode keeps one
``ConvolveBands`` node per layer and is mainly a cross-check.

Graph document (JSON)::

    {"version": 1, "in_bands": 6, "output": <id>,
     "nodes": [{"id": 0, "kind": "Input", "inputs": [], "params": {}}, ...]}
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, GraphError
from .mscnn import BnParams, ConvParams, NetworkParams, predict_mask
from .raster import Raster

GRAPH_VERSION = 1

# kind -> (min inputs, max inputs)
ARITY = {
    "Input": (0, 0),
    "Const": (0, 0),
    "SelectBand": (1, 1),
    "ConcatBands": (1, None),
    "PixelAdd": (2, 2),
    "PixelMul": (2, 2),
    "PixelAffine": (1, 1),
    "PixelMaxScalar": (1, 1),
    "PixelExp": (1, 1),
    "PixelDiv": (2, 2),
    "Convolve2D": (1, 1),
    "BandSum": (1, 1),
    "BlockMax2": (1, 1),
    "BilinearUp": (1, 2),
    "ArgmaxBands": (1, 1),
    "ConvolveBands": (1, 1),
}
PRIMITIVE_KINDS = frozenset(ARITY) - {"ConvolveBands"}


@dataclass(frozen=True)
class OpNode:
    id: int
    kind: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs),
                "params": {k: self.params[k] for k in sorted(self.params)}}


@dataclass
class OpGraph:
    nodes: list
    output: int
    in_bands: int
    version: int = GRAPH_VERSION

    def __post_init__(self):
        validate_graph(self)

    def node(self, node_id) -> OpNode:
        return self._index()[node_id]

    def _index(self):
        return {n.id: n for n in self.nodes}

    def to_dict(self):
        return {"version": self.version, "in_bands": self.in_bands, "output": self.output,
                "nodes": [n.to_dict() for n in self.nodes]}

    def __eq__(self, other):
        if not isinstance(other, OpGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# --- validation / io ----------------------------------------------------------------

def _check_params(node: OpNode):
    p = node.params
    k = node.kind

    def need(name):
        if name not in p:
            raise GraphError(f"node {node.id} ({k}) missing param {name!r}", node.id)
        return p[name]

    def finite(vals, name):
        arr = np.asarray(vals, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise GraphError(f"node {node.id} ({k}) has non-finite {name}", node.id)
        return arr

    if k == "SelectBand":
        if int(need("band")) < 0:
            raise GraphError(f"node {node.id}: negative band", node.id)
    elif k == "Convolve2D":
        if finite(need("kernel"), "kernel").shape != (9,):
            raise GraphError(f"node {node.id}: Convolve2D kernel must have 9 values", node.id)
    elif k == "ConvolveBands":
        w = finite(need("weights"), "weights")
        b = finite(need("bias"), "bias")
        if w.ndim != 3 or w.shape[2] != 9 or b.shape != (w.shape[0],):
            raise GraphError(f"node {node.id}: ConvolveBands needs weights [O][C][9] and bias [O]", node.id)
    elif k == "PixelAffine":
        s, o = finite(need("scale"), "scale"), finite(need("offset"), "offset")
        if s.ndim != 1 or s.shape != o.shape or s.size < 1:
            raise GraphError(f"node {node.id}: PixelAffine scale/offset lengths differ", node.id)
    elif k == "PixelMaxScalar":
        finite(need("c"), "c")
    elif k == "Const":
        finite(need("value"), "value")
    elif k == "BilinearUp":
        f = int(need("factor"))
        if f < 1 or f & (f - 1):
            raise GraphError(f"node {node.id}: BilinearUp factor {f} is not a power of two", node.id)


def validate_graph(graph: OpGraph) -> None:
    seen = set()
    declared = {n.id for n in graph.nodes}
    inputs = 0
    for n in graph.nodes:
        if n.id in seen:
            raise GraphError(f"duplicate node id {n.id}", n.id)
        if n.kind not in ARITY:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}", n.id)
        lo, hi = ARITY[n.kind]
        if len(n.inputs) < lo or (hi is not None and len(n.inputs) > hi):
            raise GraphError(f"node {n.id}: {n.kind} takes {lo}..{hi or 'n'} inputs, got {len(n.inputs)}", n.id)
        for ref in n.inputs:
            if ref not in declared:
                raise GraphError(f"node {n.id} references undeclared node id {ref}", ref)
            if ref not in seen:
                raise GraphError(f"node {n.id} references node {ref} that is not earlier (cycle)", n.id)
        _check_params(n)
        inputs += n.kind == "Input"
        seen.add(n.id)
    if inputs != 1:
        raise GraphError(f"graph needs exactly one Input node, found {inputs}")
    if graph.output not in seen:
        raise GraphError(f"output references undeclared node id {graph.output}", graph.output)
    if graph.in_bands < 1:
        raise GraphError("in_bands must be >= 1")


def serialize_graph(graph: OpGraph) -> str:
    return json.dumps(graph.to_dict(), separators=(",", ":"), allow_nan=False) + "\n"


def parse_graph(text: str) -> OpGraph:
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise GraphError(f"graph document is not valid JSON: {exc}") from exc
    try:
        if int(doc["version"]) != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {doc['version']}")
        nodes = []
        for d in doc["nodes"]:
            nodes.append(OpNode(int(d["id"]), str(d["kind"]), tuple(int(i) for i in d["inputs"]),
                                dict(d.get("params", {}))))
        return OpGraph(nodes, int(doc["output"]), int(doc["in_bands"]), int(doc["version"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(f"malformed graph document: {exc!r}") from exc


def prune(graph: OpGraph) -> OpGraph:
    """Drop nodes the output does not depend on (the Input node is always kept)."""
    idx = graph._index()
    live = set()
    stack = [graph.output]
    while stack:
        nid = stack.pop()
        if nid in live:
            continue
        live.add(nid)
        stack.extend(idx[nid].inputs)
    keep = [n for n in graph.nodes if n.id in live or n.kind == "Input"]
    return OpGraph(keep, graph.output, graph.in_bands, graph.version)


def count_ops(graph: OpGraph) -> Counter:
    return Counter(n.kind for n in graph.nodes)


# --- BN folding -------------------------------------------------------------------------

def fold_bn(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Absorb inference-mode BN into the preceding convolution."""
    if bn.gamma.shape[0] != conv.out_ch:
        raise ArgumentError(f"BN has {bn.gamma.shape[0]} channels, conv has {conv.out_ch} outputs")
    dt = conv.weights.dtype
    a = (bn.gamma / np.sqrt(bn.running_var + dt.type(bn.eps))).astype(dt)
    w = conv.weights * a[:, None, None, None]
    b = a * (conv.bias - bn.running_mean) + bn.beta
    return ConvParams(w.astype(dt), b.astype(dt))


# --- lowering -----------------------------------------------------------------------------

class _Builder:
    def __init__(self):
        self.nodes = []

    def add(self, kind, inputs=(), **params):
        nid = len(self.nodes)
        self.nodes.append(OpNode(nid, kind, tuple(inputs), params))
        return nid


def _floats(a):
    return [float(v) for v in np.asarray(a).reshape(-1)]


def _conv_faithful(b: _Builder, src, conv: ConvParams, relu: bool):
    sel = [b.add("SelectBand", [src], band=c) for c in range(conv.in_ch)]
    outs = []
    for o in range(conv.out_ch):
        acc = None
        for c in range(conv.in_ch):
            k = b.add("Convolve2D", [sel[c]], kernel=_floats(conv.weights[o, c]))
            acc = k if acc is None else b.add("PixelAdd", [acc, k])
        outs.append(b.add("PixelAffine", [acc], scale=[1.0], offset=[float(conv.bias[o])]))
    out = b.add("ConcatBands", outs)
    return b.add("PixelMaxScalar", [out], c=0.0) if relu else out


def _conv_fused(b: _Builder, src, conv: ConvParams, relu: bool):
    w = conv.weights.reshape(conv.out_ch, conv.in_ch, 9)
    out = b.add("ConvolveBands", [src], weights=[[_floats(w[o, c]) for c in range(conv.in_ch)]
                                                  for o in range(conv.out_ch)],
                bias=_floats(conv.bias))
    return b.add("PixelMaxScalar", [out], c=0.0) if relu else out


def _softmax2(b: _Builder, logits):
    z0 = b.add("SelectBand", [logits], band=0)
    z1 = b.add("SelectBand", [logits], band=1)
    # max(z0, z1) = z0 + max(z1 - z0, 0)
    diff = b.add("PixelAdd", [z1, b.add("PixelAffine", [z0], scale=[-1.0], offset=[0.0])])
    m = b.add("PixelAdd", [z0, b.add("PixelMaxScalar", [diff], c=0.0)])
    neg_m = b.add("PixelAffine", [m], scale=[-1.0], offset=[0.0])
    e0 = b.add("PixelExp", [b.add("PixelAdd", [z0, neg_m])])
    e1 = b.add("PixelExp", [b.add("PixelAdd", [z1, neg_m])])
    s = b.add("PixelAdd", [e0, e1])
    return b.add("ConcatBands", [b.add("PixelDiv", [e0, s]), b.add("PixelDiv", [e1, s])])


def lower(params: NetworkParams, mode: str = "faithful", terminal: str = "softmax") -> OpGraph:
    """Fold BN and emit the network as an op graph.

    ``terminal`` is ``softmax`` (probability map output) or ``argmax`` (class map).
    """
    if params.training:
        raise ArgumentError("lowering needs inference-mode params (BN running statistics)")
    if mode not in ("faithful", "fused"):
        raise ArgumentError(f"unknown lowering mode {mode!r}")
    if terminal not in ("softmax", "argmax"):
        raise ArgumentError(f"unknown terminal {terminal!r}")
    emit = _conv_faithful if mode == "faithful" else _conv_fused
    cfg = params.config
    b = _Builder()
    x = b.add("Input")
    h = x
    ups = []
    for s in range(1, cfg.num_scales + 1):
        for k in (1, 2, 3):
            layer = f"s{s}.m{k}"
            h = emit(b, h, fold_bn(params.conv(layer), params.bn(layer)), True)
        layer = f"s{s}.single"
        f = emit(b, h, fold_bn(params.conv(layer), params.bn(layer)), True)
        ups.append(b.add("BilinearUp", [f, x], factor=2 ** (s - 1)))
        if s < cfg.num_scales:
            h = b.add("BlockMax2", [h])
    stack = b.add("ConcatBands", ups)
    logits = emit(b, stack, params.fusion, False)
    out = _softmax2(b, logits) if terminal == "softmax" else b.add("ArgmaxBands", [logits])
    return prune(OpGraph(b.nodes, out, cfg.in_bands))


def expected_faithful_counts(params_or_config, terminal="softmax") -> Counter:
    """Closed-form node counts for a faithful-mode graph."""
    cfg = getattr(params_or_config, "config", params_or_config)
    c = Counter()

    def conv(cin, cout, relu):
        c["SelectBand"] += cin
        c["Convolve2D"] += cin * cout
        c["PixelAdd"] += cout * (cin - 1)
        c["PixelAffine"] += cout
        c["ConcatBands"] += 1
        c["PixelMaxScalar"] += int(relu)

    c["Input"] = 1
    for _, cin, cout in cfg.layer_names():
        conv(cin, cout, True)
    c["BilinearUp"] += cfg.num_scales
    c["BlockMax2"] += cfg.num_scales - 1
    c["ConcatBands"] += 1
    conv(cfg.num_scales, cfg.num_classes, False)
    if terminal == "softmax":
        c.update({"SelectBand": 2, "PixelAffine": 2, "PixelAdd": 5, "PixelMaxScalar": 1,
                  "PixelExp": 2, "PixelDiv": 2, "ConcatBands": 1})
    else:
        c["ArgmaxBands"] += 1
    return c


# --- execution -------------------------------------------------------------------------

def _eval_node(node: OpNode, args, image):
    k, p = node.kind, node.params
    dt = np.float32
    if k == "Input":
        return image
    if k == "Const":
        return np.full((1,) + image.shape[1:], p["value"], dtype=dt)
    if k == "SelectBand":
        band = int(p["band"])
        if band >= args[0].shape[0]:
            raise GraphError(f"node {node.id}: band {band} out of range", node.id)
        return args[0][band:band + 1]
    if k == "ConcatBands":
        return np.concatenate(args, axis=0)
    if k in ("PixelAdd", "PixelMul", "PixelDiv"):
        a, c = args
        if a.shape[1:] != c.shape[1:] or (a.shape[0] != c.shape[0] and 1 not in (a.shape[0], c.shape[0])):
            raise GraphError(f"node {node.id}: operand shapes {a.shape} and {c.shape} differ", node.id)
        if k == "PixelAdd":
            return a + c
        if k == "PixelMul":
            return a * c
        return a / c
    if k == "PixelAffine":
        x = args[0]
        scale = np.asarray(p["scale"], dtype=dt)
        offset = np.asarray(p["offset"], dtype=dt)
        if scale.size not in (1, x.shape[0]):
            raise GraphError(f"node {node.id}: {scale.size} affine coefficients for {x.shape[0]} bands", node.id)
        return x * scale[:, None, None] + offset[:, None, None]
    if k == "PixelMaxScalar":
        return np.maximum(args[0], dt(p["c"]))
    if k == "PixelExp":
        return np.exp(args[0])
    if k == "Convolve2D":
        x = args[0]
        if x.shape[0] != 1:
            raise GraphError(f"node {node.id}: Convolve2D needs a single band, got {x.shape[0]}", node.id)
        kern = np.asarray(p["kernel"], dtype=dt).reshape(1, 1, 3, 3)
        return kernels.conv3x3(x, kern, np.zeros(1, dtype=dt))
    if k == "ConvolveBands":
        w = np.asarray(p["weights"], dtype=dt)
        if w.shape[1] != args[0].shape[0]:
            raise GraphError(f"node {node.id}: kernel expects {w.shape[1]} bands, got {args[0].shape[0]}", node.id)
        return kernels.conv3x3(args[0], w.reshape(w.shape[0], w.shape[1], 3, 3), np.asarray(p["bias"], dtype=dt))
    if k == "BandSum":
        x = args[0]
        acc = x[0].copy()
        for band in range(1, x.shape[0]):
            acc += x[band]
        return acc[None]
    if k == "BlockMax2":
        return kernels.block_max2(args[0])
    if k == "BilinearUp":
        f = int(p["factor"])
        if len(args) == 2:
            return kernels.bilinear_up(args[0], f, args[1].shape[1], args[1].shape[2])
        return kernels.bilinear_up(args[0], f)
    if k == "ArgmaxBands":
        return np.argmax(args[0], axis=0)[None].astype(dt)
    raise GraphError(f"node {node.id}: unknown kind {k!r}", node.id)


@dataclass
class GraphResult:
    output: Raster
    prob: Raster | None
    mask: Raster


def _levels(graph: OpGraph):
    depth = {}
    for n in graph.nodes:
        depth[n.id] = 1 + max((depth[i] for i in n.inputs), default=-1)
    levels = {}
    for n in graph.nodes:
        levels.setdefault(depth[n.id], []).append(n)
    return [levels[d] for d in sorted(levels)]


def run_graph(graph: OpGraph, data: np.ndarray, threads: int = 1) -> np.ndarray:
    """Evaluate the graph on a (bands, H, W) array and return the output array."""
    image = np.ascontiguousarray(data, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != graph.in_bands:
        raise ArgumentError(f"image has {image.shape[0]} bands, graph expects {graph.in_bands}")
    remaining = Counter(i for n in graph.nodes for i in n.inputs)
    memo = {}

    def release(node):
        for i in node.inputs:
            remaining[i] -= 1
            if remaining[i] == 0 and i != graph.output:
                memo.pop(i, None)

    if threads <= 1:
        for node in graph.nodes:
            memo[node.id] = _eval_node(node, [memo[i] for i in node.inputs], image)
            release(node)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for level in _levels(graph):
                results = pool.map(lambda n: _eval_node(n, [memo[i] for i in n.inputs], image), level)
                for node, res in zip(level, list(results)):
                    memo[node.id] = res
                for node in level:
                    release(node)
    return memo[graph.output]


def execute_graph(graph: OpGraph, image: Raster, threads: int = 1) -> GraphResult:
    """Run a lowered network; two-band outputs are probabilities, one-band outputs a class map."""
    out = Raster(run_graph(graph, image.data, threads))
    if out.bands == 2:
        return GraphResult(out, out, predict_mask(out))
    return GraphResult(out, None, out)


def primitive_closure(graph: OpGraph) -> bool:
    return all(n.kind in PRIMITIVE_KINDS for n in graph.nodes)
