"""Shared test fixtures: toy model loading, synthetic images, random graphs."""

import json
import os

import numpy as np

from layermask import graph as graph_mod
from layermask.tensor import DTYPE, bilinear_resize

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY_DIR = os.path.join(ROOT, "models", "toy_resnet")
GOLDEN_PATH = os.path.join(ROOT, "tests", "data", "toy_goldens.json")


def load_toy_model():
    with open(os.path.join(TOY_DIR, "graph.json"), "r", encoding="utf-8") as f:
        g = graph_mod.load_graph(f.read())
    store = graph_mod.read_weights_file(os.path.join(TOY_DIR, "weights.lmw1"))
    return g, store


def load_goldens():
    with open(GOLDEN_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def natural_image(seed, h=224, w=224):
    """Smooth multi-scale color field with fine texture; values in [0,1]."""
    rng = np.random.default_rng(seed)
    img = np.zeros((3, h, w), dtype=DTYPE)
    for cells, weight in ((4, 0.45), (8, 0.25), (16, 0.15), (56, 0.10), (112, 0.05)):
        cells = min(cells, h, w)
        low = rng.random((3, cells, cells)).astype(DTYPE)
        img += DTYPE(weight) * bilinear_resize(low, h, w)
    lo, hi = img.min(), img.max()
    return ((img - lo) / (hi - lo)).astype(DTYPE)


def random_mask(rng, h, w, density=None):
    if density is None:
        density = rng.uniform(0.2, 0.8)
    m = (rng.random((1, h, w)) < density).astype(DTYPE)
    return m


# ---------------------------------------------------------------------------
# Random small spatial graphs for mask-propagation checks

def _conv_entry(nid, src, c_in, c_out, k, s, p, has_bias):
    wn = {"weight": f"{nid}.w"}
    if has_bias:
        wn["bias"] = f"{nid}.b"
    return {"id": nid, "op": "conv",
            "params": {"out_channels": c_out, "in_channels": c_in, "kernel": k,
                       "stride": s, "zero_padding": p, "has_bias": has_bias},
            "inputs": [src], "weight_names": wn}


def _bn_entry(nid, src):
    return {"id": nid, "op": "batchnorm", "params": {"eps": 1e-5}, "inputs": [src],
            "weight_names": {"gamma": f"{nid}.g", "beta": f"{nid}.b",
                             "mean": f"{nid}.m", "var": f"{nid}.v"}}


def random_spatial_graph(rng, force_residual=None):
    """Graph with <=4 random spatial nodes (kernels 1-3, strides 1-2), an
    optional residual join, and a pooled linear head. Returns (graph, store)."""
    c = 2
    h = int(rng.integers(6, 13))
    w = int(rng.integers(6, 13))
    layers = [{"id": "in", "op": "input", "params": {}, "inputs": [], "weight_names": {}}]
    store = {}
    idx = 0

    def fresh(kind):
        nonlocal idx
        idx += 1
        return f"{kind}{idx}"

    def add_conv(src, cin, cout, k, s, p):
        nid = fresh("conv")
        has_bias = bool(rng.integers(0, 2))
        layers.append(_conv_entry(nid, src, cin, cout, k, s, p, has_bias))
        store[f"{nid}.w"] = rng.normal(0, 0.5, (cout, cin, k, k)).astype(DTYPE)
        if has_bias:
            store[f"{nid}.b"] = rng.normal(0, 0.2, cout).astype(DTYPE)
        return nid

    def add_bn(src, channels):
        nid = fresh("bn")
        layers.append(_bn_entry(nid, src))
        store[f"{nid}.g"] = rng.uniform(0.5, 1.5, channels).astype(DTYPE)
        store[f"{nid}.b"] = rng.normal(0, 0.2, channels).astype(DTYPE)
        store[f"{nid}.m"] = rng.normal(0, 0.2, channels).astype(DTYPE)
        store[f"{nid}.v"] = rng.uniform(0.5, 1.5, channels).astype(DTYPE)
        return nid

    def out_size(n, k, s, p):
        return (n + 2 * p - k) // s + 1

    cur, ch, hh, ww = "in", c, h, w
    residual = bool(rng.integers(0, 2)) if force_residual is None else force_residual
    n_ops = int(rng.integers(1, 5))
    for _ in range(n_ops):
        op = rng.choice(["conv", "maxpool", "relu", "bn"])
        if op in ("conv", "maxpool"):
            k = int(rng.integers(1, 4))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, k))  # p <= k-1 keeps edge windows non-empty
            if out_size(hh, k, s, p) < 2 or out_size(ww, k, s, p) < 2:
                k, s, p = 1, 1, 0
            if op == "conv":
                cur = add_conv(cur, ch, ch, k, s, p)
            else:
                nid = fresh("pool")
                layers.append({"id": nid, "op": "maxpool",
                               "params": {"kernel": k, "stride": s, "zero_padding": p},
                               "inputs": [cur], "weight_names": {}})
                cur = nid
            hh, ww = out_size(hh, k, s, p), out_size(ww, k, s, p)
        elif op == "relu":
            nid = fresh("relu")
            layers.append({"id": nid, "op": "relu", "params": {}, "inputs": [cur],
                           "weight_names": {}})
            cur = nid
        else:
            cur = add_bn(cur, ch)

    if residual and hh >= 3 and ww >= 3:
        src = cur
        main = add_conv(src, ch, ch, 3, 1, 1)
        main = add_bn(main, ch)
        if rng.integers(0, 2):
            short = add_conv(src, ch, ch, 1, 1, 0)
        else:
            short = src
        nid = fresh("add")
        layers.append({"id": nid, "op": "add", "params": {}, "inputs": [main, short],
                       "weight_names": {}})
        nid2 = fresh("relu")
        layers.append({"id": nid2, "op": "relu", "params": {}, "inputs": [nid],
                       "weight_names": {}})
        cur = nid2

    layers.append({"id": "gap", "op": "avgpool_global", "params": {}, "inputs": [cur],
                   "weight_names": {}})
    layers.append({"id": "flat", "op": "flatten", "params": {}, "inputs": ["gap"],
                   "weight_names": {}})
    layers.append({"id": "fc", "op": "linear",
                   "params": {"in_features": ch, "out_features": 3, "has_bias": True},
                   "inputs": ["flat"], "weight_names": {"weight": "fc.w", "bias": "fc.b"}})
    layers.append({"id": "out", "op": "output", "params": {}, "inputs": ["fc"],
                   "weight_names": {}})
    store["fc.w"] = rng.normal(0, 0.5, (3, ch)).astype(DTYPE)
    store["fc.b"] = rng.normal(0, 0.2, 3).astype(DTYPE)

    doc = {"input_shape": [c, h, w], "feature_tap": "flat", "layers": layers}
    return graph_mod.graph_from_dict(doc), store
