#!/usr/bin/env python3
"""Generate the toy residual network shipped with the repo.

Nine weighted layers on a 3x32x32 input: stem conv + maxpool, three residual
blocks (the second downsamples through a 1x1 shortcut conv), global average
pool, flatten (the feature tap) and a 10-class linear head. Weights are
drawn from a fixed seed so the files are reproducible byte for byte.
"""

import argparse
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from layermask import graph as graph_mod  # noqa: E402
from layermask.netpbm import atomic_write_bytes, atomic_write_text  # noqa: E402


def conv_entry(nid, src, c_in, c_out, k, s, p):
    return {
        "id": nid, "op": "conv",
        "params": {"out_channels": c_out, "in_channels": c_in, "kernel": k,
                   "stride": s, "zero_padding": p, "has_bias": False},
        "inputs": [src],
        "weight_names": {"weight": f"{nid}.w"},
    }


def bn_entry(nid, src):
    return {
        "id": nid, "op": "batchnorm", "params": {"eps": 1e-5}, "inputs": [src],
        "weight_names": {"gamma": f"{nid}.g", "beta": f"{nid}.b",
                         "mean": f"{nid}.m", "var": f"{nid}.v"},
    }


def simple(nid, op, src, params=None):
    return {"id": nid, "op": op, "params": params or {}, "inputs": [src], "weight_names": {}}


def build_graph_doc():
    layers = [
        {"id": "in", "op": "input", "params": {}, "inputs": [], "weight_names": {}},
        conv_entry("conv1", "in", 3, 8, 3, 1, 1),
        bn_entry("bn1", "conv1"),
        simple("relu1", "relu", "bn1"),
        simple("pool1", "maxpool", "relu1", {"kernel": 3, "stride": 2, "zero_padding": 1}),
        # block 1: identity skip at 8ch / 16x16
        conv_entry("b1c1", "pool1", 8, 8, 3, 1, 1),
        bn_entry("b1n1", "b1c1"),
        simple("b1r1", "relu", "b1n1"),
        conv_entry("b1c2", "b1r1", 8, 8, 3, 1, 1),
        bn_entry("b1n2", "b1c2"),
        {"id": "add1", "op": "add", "params": {}, "inputs": ["b1n2", "pool1"],
         "weight_names": {}},
        simple("b1out", "relu", "add1"),
        # block 2: downsample to 16ch / 8x8 with a 1x1 stride-2 shortcut conv
        conv_entry("b2c1", "b1out", 8, 16, 3, 2, 1),
        bn_entry("b2n1", "b2c1"),
        simple("b2r1", "relu", "b2n1"),
        conv_entry("b2c2", "b2r1", 16, 16, 3, 1, 1),
        bn_entry("b2n2", "b2c2"),
        conv_entry("b2sc", "b1out", 8, 16, 1, 2, 0),
        {"id": "add2", "op": "add", "params": {}, "inputs": ["b2n2", "b2sc"],
         "weight_names": {}},
        simple("b2out", "relu", "add2"),
        # block 3: identity skip at 16ch / 8x8
        conv_entry("b3c1", "b2out", 16, 16, 3, 1, 1),
        bn_entry("b3n1", "b3c1"),
        simple("b3r1", "relu", "b3n1"),
        conv_entry("b3c2", "b3r1", 16, 16, 3, 1, 1),
        bn_entry("b3n2", "b3c2"),
        {"id": "add3", "op": "add", "params": {}, "inputs": ["b3n2", "b2out"],
         "weight_names": {}},
        simple("b3out", "relu", "add3"),
        simple("pool", "avgpool_global", "b3out"),
        simple("flat", "flatten", "pool"),
        {"id": "fc", "op": "linear",
         "params": {"in_features": 16, "out_features": 10, "has_bias": True},
         "inputs": ["flat"], "weight_names": {"weight": "fc.w", "bias": "fc.b"}},
        simple("out", "output", "fc"),
    ]
    return {"input_shape": [3, 32, 32], "feature_tap": "flat", "layers": layers}


def build_weights(doc, seed):
    rng = np.random.default_rng(seed)
    store = {}
    for entry in doc["layers"]:
        if entry["op"] == "conv":
            p = entry["params"]
            fan_in = p["in_channels"] * p["kernel"] ** 2
            shape = (p["out_channels"], p["in_channels"], p["kernel"], p["kernel"])
            store[entry["weight_names"]["weight"]] = \
                rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
        elif entry["op"] == "batchnorm":
            wn = entry["weight_names"]
            c = None
            # channel count comes from the producing conv
            src = entry["inputs"][0]
            producer = next(e for e in doc["layers"] if e["id"] == src)
            c = producer["params"]["out_channels"]
            store[wn["gamma"]] = rng.uniform(0.8, 1.2, c).astype(np.float32)
            store[wn["beta"]] = rng.normal(0.0, 0.1, c).astype(np.float32)
            store[wn["mean"]] = rng.normal(0.0, 0.1, c).astype(np.float32)
            store[wn["var"]] = rng.uniform(0.8, 1.2, c).astype(np.float32)
        elif entry["op"] == "linear":
            p = entry["params"]
            store[entry["weight_names"]["weight"]] = \
                rng.normal(0.0, 1.0 / np.sqrt(p["in_features"]),
                           (p["out_features"], p["in_features"])).astype(np.float32)
            store[entry["weight_names"]["bias"]] = \
                rng.normal(0.0, 0.2, p["out_features"]).astype(np.float32)
    return store


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..",
                                                  "models", "toy_resnet"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    doc = build_graph_doc()
    g = graph_mod.graph_from_dict(doc)  # validates before anything is written
    store = build_weights(doc, args.seed)
    graph_mod.forward(g, store, np.zeros(g.input_shape, dtype=np.float32))  # sanity

    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "graph.json"), json.dumps(doc, indent=2) + "\n")
    atomic_write_bytes(os.path.join(args.out, "weights.lmw1"), graph_mod.save_weights(store))
    n_params = sum(v.size for v in store.values())
    print(f"wrote {args.out}: {len(store)} tensors, {n_params} parameters")


if __name__ == "__main__":
    main()
