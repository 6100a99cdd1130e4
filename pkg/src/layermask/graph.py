"""Model graphs: a DAG of layer specs, a named weight store, and a forward pass.

Graph documents are JSON with top-level keys `input_shape` [C,H,W],
`feature_tap` (node id of the penultimate activation, after global pooling
and before the final linear layer) and `layers`, an array of
{id, op, params, inputs, weight_names}. Weights live in LMW1 files: magic
"LMW1", little-endian u32 tensor count, then per tensor a u16 name length,
the UTF-8 name, u8 ndim, ndim * u32 dims and the row-major float32 payload.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, GraphError
from . import tensor as T

OP_KINDS = (
    "input", "output", "conv", "maxpool", "avgpool_global",
    "relu", "batchnorm", "linear", "add", "flatten",
)

# ops whose masked counterpart propagates a spatial mask
SPATIAL_OPS = ("conv", "maxpool")
ELEMENTWISE_OPS = ("relu", "batchnorm")

_PARAM_KEYS = {
    "conv": {"out_channels", "in_channels", "kernel", "stride", "zero_padding", "has_bias"},
    "maxpool": {"kernel", "stride", "zero_padding"},
    "batchnorm": {"eps"},
    "linear": {"in_features", "out_features", "has_bias"},
}


@dataclass
class LayerSpec:
    id: str
    op_kind: str
    params: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    weight_names: dict = field(default_factory=dict)

    def conv_spec(self) -> T.ConvSpec:
        p = self.params
        return T.ConvSpec(
            out_channels=p["out_channels"],
            in_channels=p["in_channels"],
            kernel=p["kernel"],
            stride=p.get("stride", 1),
            zero_padding=p.get("zero_padding", 0),
            has_bias=p.get("has_bias", True),
        )


@dataclass
class ModelGraph:
    layers: list            # LayerSpec in topological order
    input_shape: tuple      # (C, H, W)
    feature_tap: str
    shapes: dict            # node id -> inferred activation shape
    input_id: str = ""
    output_id: str = ""

    def layer(self, node_id: str) -> LayerSpec:
        return self._by_id[node_id]

    def __post_init__(self):
        self._by_id = {l.id: l for l in self.layers}


def _arity(op_kind: str) -> int:
    if op_kind == "input":
        return 0
    if op_kind == "add":
        return 2
    return 1


def _toposort(layers):
    """Kahn's algorithm; ties resolved by declaration order."""
    index = {l.id: i for i, l in enumerate(layers)}
    indegree = {l.id: len(l.inputs) for l in layers}
    consumers = {l.id: [] for l in layers}
    for l in layers:
        for src in l.inputs:
            consumers[src].append(l.id)
    ready = sorted((i for i, d in ((l.id, indegree[l.id]) for l in layers) if d == 0),
                   key=index.__getitem__)
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        changed = False
        for dst in consumers[nid]:
            indegree[dst] -= 1
            if indegree[dst] == 0:
                ready.append(dst)
                changed = True
        if changed:
            ready.sort(key=index.__getitem__)
    if len(order) != len(layers):
        stuck = sorted(set(index) - set(order), key=index.__getitem__)
        raise GraphError(f"cycle through layer '{stuck[0]}'")
    by_id = {l.id: l for l in layers}
    return [by_id[nid] for nid in order]


def _infer_shape(layer: LayerSpec, in_shapes):
    op = layer.op_kind
    if op in ("input", "output"):
        return in_shapes[0] if in_shapes else None
    s = in_shapes[0]
    if op == "conv":
        spec = layer.conv_spec()
        if len(s) != 3 or s[0] != spec.in_channels:
            raise GraphError(f"layer '{layer.id}': input shape {s} incompatible with conv {spec}")
        return (spec.out_channels,
                T.conv_output_size(s[1], spec.kernel, spec.stride, spec.zero_padding),
                T.conv_output_size(s[2], spec.kernel, spec.stride, spec.zero_padding))
    if op == "maxpool":
        if len(s) != 3:
            raise GraphError(f"layer '{layer.id}': maxpool needs a (C,H,W) input, got {s}")
        k = layer.params["kernel"]
        st = layer.params.get("stride", k)
        p = layer.params.get("zero_padding", 0)
        return (s[0], T.conv_output_size(s[1], k, st, p), T.conv_output_size(s[2], k, st, p))
    if op in ELEMENTWISE_OPS:
        return s
    if op == "add":
        if in_shapes[0] != in_shapes[1]:
            raise GraphError(f"layer '{layer.id}': add inputs {in_shapes[0]} vs {in_shapes[1]}")
        return s
    if op == "avgpool_global":
        if len(s) != 3:
            raise GraphError(f"layer '{layer.id}': global pooling needs (C,H,W), got {s}")
        return (s[0],)
    if op == "flatten":
        return (int(np.prod(s)),)
    if op == "linear":
        n_in = layer.params["in_features"]
        if len(s) != 1 or s[0] != n_in:
            raise GraphError(f"layer '{layer.id}': linear expects ({n_in},), got {s}")
        return (layer.params["out_features"],)
    raise GraphError(f"layer '{layer.id}': unknown op '{op}'")


def graph_from_dict(doc: dict) -> ModelGraph:
    for key in ("input_shape", "feature_tap", "layers"):
        if key not in doc:
            raise GraphError(f"graph document missing '{key}'")
    input_shape = tuple(int(v) for v in doc["input_shape"])
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise GraphError(f"bad input_shape {doc['input_shape']}")

    layers = []
    seen = set()
    for entry in doc["layers"]:
        nid = entry.get("id")
        if not isinstance(nid, str) or not nid:
            raise GraphError(f"layer with missing/empty id: {entry!r}")
        if nid in seen:
            raise GraphError(f"duplicate layer id '{nid}'")
        seen.add(nid)
        op = entry.get("op")
        if op not in OP_KINDS:
            raise GraphError(f"layer '{nid}': unknown op '{op}'")
        params = dict(entry.get("params", {}))
        allowed = _PARAM_KEYS.get(op, set())
        for key in params:
            if key not in allowed:
                raise GraphError(f"layer '{nid}': unexpected param '{key}' for op '{op}'")
        layers.append(LayerSpec(
            id=nid, op_kind=op, params=params,
            inputs=list(entry.get("inputs", [])),
            weight_names=dict(entry.get("weight_names", {})),
        ))

    ids = {l.id for l in layers}
    n_in = sum(1 for l in layers if l.op_kind == "input")
    n_out = sum(1 for l in layers if l.op_kind == "output")
    if n_in != 1 or n_out != 1:
        raise GraphError(f"graph needs exactly one input and one output node, got {n_in}/{n_out}")
    for l in layers:
        if len(l.inputs) != _arity(l.op_kind):
            raise GraphError(
                f"layer '{l.id}': op '{l.op_kind}' takes {_arity(l.op_kind)} inputs, got {len(l.inputs)}")
        for src in l.inputs:
            if src not in ids:
                raise GraphError(f"layer '{l.id}': unknown input '{src}'")
            if src == l.id:
                raise GraphError(f"cycle through layer '{l.id}'")

    ordered = _toposort(layers)
    input_id = next(l.id for l in ordered if l.op_kind == "input")
    output_id = next(l.id for l in ordered if l.op_kind == "output")

    shapes = {}
    for l in ordered:
        ins = [shapes[s] for s in l.inputs]
        shapes[l.id] = input_shape if l.op_kind == "input" else _infer_shape(l, ins)

    tap = doc["feature_tap"]
    if tap not in ids:
        raise GraphError(f"feature_tap '{tap}' is not a layer id")
    ancestors, frontier = set(), [output_id]
    by_id = {l.id: l for l in layers}
    while frontier:
        nid = frontier.pop()
        for src in by_id[nid].inputs:
            if src not in ancestors:
                ancestors.add(src)
                frontier.append(src)
    if tap not in ancestors:
        raise GraphError(f"feature_tap '{tap}' is not an ancestor of the output node")

    return ModelGraph(layers=ordered, input_shape=input_shape, feature_tap=tap,
                      shapes=shapes, input_id=input_id, output_id=output_id)


def load_graph(text: str) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError(f"graph document is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise GraphError("graph document must be a JSON object")
    return graph_from_dict(doc)


# --------------------------------------------------------------------------
# LMW1 weight store

LMW1_MAGIC = b"LMW1"
_MAX_NDIM = 8


def save_weights(store: dict) -> bytes:
    chunks = [LMW1_MAGIC, struct.pack("<I", len(store))]
    for name, arr in store.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    return b"".join(chunks)


def load_weights(data: bytes) -> dict:
    if data[:4] != LMW1_MAGIC:
        raise FileFormatError(f"bad magic {data[:4]!r}, expected {LMW1_MAGIC!r}")
    if len(data) < 8:
        raise FileFormatError("truncated LMW1 header")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    store = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FileFormatError(f"truncated LMW1 payload while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in store:
            raise FileFormatError(f"duplicate tensor name '{name}'")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        if ndim < 1 or ndim > _MAX_NDIM:
            raise FileFormatError(f"tensor '{name}': unsupported ndim {ndim}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        if min(dims) < 1:
            raise FileFormatError(f"tensor '{name}': zero dimension")
        n = int(np.prod(dims))
        raw = take(4 * n, f"data of '{name}'")
        store[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(T.DTYPE)
    if pos != len(data):
        raise FileFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return store


def read_weights_file(path) -> dict:
    with open(path, "rb") as f:
        return load_weights(f.read())


# --------------------------------------------------------------------------
# Execution

def _fetch(layer: LayerSpec, store: dict, role: str, shape):
    name = layer.weight_names.get(role)
    if name is None:
        raise GraphError(f"layer '{layer.id}': missing weight_names['{role}']")
    if name not in store:
        raise GraphError(f"layer '{layer.id}': tensor '{name}' not in weight store")
    arr = store[name]
    if arr.shape != shape:
        raise GraphError(
            f"layer '{layer.id}': tensor '{name}' has shape {arr.shape}, expected {shape}")
    return arr


def layer_weights(layer: LayerSpec, store: dict):
    """Resolve and shape-check the tensors a layer needs from the store."""
    op = layer.op_kind
    if op == "conv":
        spec = layer.conv_spec()
        w = _fetch(layer, store, "weight",
                   (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
        b = _fetch(layer, store, "bias", (spec.out_channels,)) if spec.has_bias else None
        return {"weight": w, "bias": b, "spec": spec}
    if op == "batchnorm":
        c = None  # checked against input at run time
        out = {}
        for role in ("gamma", "beta", "mean", "var"):
            name = layer.weight_names.get(role)
            if name is None or name not in store:
                raise GraphError(f"layer '{layer.id}': missing batchnorm tensor '{role}'")
            out[role] = store[name]
        out["eps"] = layer.params.get("eps", 1e-5)
        return out
    if op == "linear":
        n_in, n_out = layer.params["in_features"], layer.params["out_features"]
        w = _fetch(layer, store, "weight", (n_out, n_in))
        b = _fetch(layer, store, "bias", (n_out,)) if layer.params.get("has_bias", True) else None
        return {"weight": w, "bias": b}
    return {}


def apply_layer(layer: LayerSpec, store: dict, inputs):
    """Plain (unmasked) application of one layer to its input activations."""
    op = layer.op_kind
    x = inputs[0] if inputs else None
    if op in ("input", "output"):
        return x
    if op == "conv":
        wb = layer_weights(layer, store)
        return T.conv2d(x, wb["weight"], wb["bias"], wb["spec"])
    if op == "maxpool":
        k = layer.params["kernel"]
        return T.maxpool2d(x, k, layer.params.get("stride", k),
                           layer.params.get("zero_padding", 0))
    if op == "relu":
        return T.relu(x)
    if op == "batchnorm":
        wb = layer_weights(layer, store)
        return T.batchnorm_infer(x, wb["gamma"], wb["beta"], wb["mean"], wb["var"], wb["eps"])
    if op == "add":
        return T.add(inputs[0], inputs[1])
    if op == "avgpool_global":
        return T.global_avgpool(x)
    if op == "flatten":
        return np.ascontiguousarray(x).reshape(-1)
    if op == "linear":
        wb = layer_weights(layer, store)
        return T.linear(x, wb["weight"], wb["bias"])
    raise GraphError(f"layer '{layer.id}': unknown op '{op}'")


def forward(graph: ModelGraph, store: dict, x: np.ndarray):
    """Run the graph on a (C,H,W) input; returns (logits, features).

    Features are the raveled activation at the graph's feature tap.
    """
    if tuple(x.shape) != graph.input_shape:
        raise ValueError(f"input shape {x.shape} != graph input {graph.input_shape}")
    x = np.asarray(x, dtype=T.DTYPE)
    acts = {}
    for layer in graph.layers:
        ins = [acts[s] for s in layer.inputs]
        out = x if layer.op_kind == "input" else apply_layer(layer, store, ins)
        if tuple(out.shape) != graph.shapes[layer.id]:
            raise GraphError(
                f"layer '{layer.id}': produced {out.shape}, inferred {graph.shapes[layer.id]}")
        acts[layer.id] = out
    return acts[graph.output_id].copy(), acts[graph.feature_tap].reshape(-1).copy()
