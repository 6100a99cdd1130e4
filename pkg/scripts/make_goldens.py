#!/usr/bin/env python3
"""Freeze regression values for the toy model into tests/data/toy_goldens.json.

Rerun only when the kernels change on purpose; the tests compare against
these values at 1e-5 relative tolerance.
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from layermask import evaluation, graph as graph_mod, masking, perturb  # noqa: E402
from layermask.netpbm import atomic_write_text  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..")


def main():
    with open(os.path.join(ROOT, "models", "toy_resnet", "graph.json")) as f:
        g = graph_mod.load_graph(f.read())
    store = graph_mod.read_weights_file(os.path.join(ROOT, "models", "toy_resnet",
                                                     "weights.lmw1"))

    x = np.random.default_rng(123).random((3, 32, 32), dtype=np.float32)
    x2 = np.random.default_rng(321).random((3, 32, 32), dtype=np.float32)
    mask = (np.random.default_rng(7).random((1, 32, 32)) < 0.6).astype(np.float32)

    logits, feats = graph_mod.forward(g, store, x)
    m_neighbor, _ = masking.masked_forward(g, store, x, mask)
    m_zero, _ = masking.masked_forward(g, store, x, mask,
                                       masking.MaskingConfig("zero"))
    m_prefix, _ = masking.masked_forward(g, store, x, mask,
                                         masking.MaskingConfig("neighbor", 6))

    norm = perturb.Normalization((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    lm = perturb.Strategy("layer_masking", norm)
    linearity = evaluation.linearity_test(g, store, x, 8, lm)
    collapse = evaluation.collapse_test(g, store, [(x, x2)], [8, 16, 24, 32], lm)

    golden = {
        "input_seed": 123,
        "pair_seed": 321,
        "mask_seed": 7,
        "logits": [float(v) for v in logits],
        "features": [float(v) for v in feats],
        "masked_logits_neighbor": [float(v) for v in m_neighbor],
        "masked_logits_zero": [float(v) for v in m_zero],
        "masked_logits_prefix6": [float(v) for v in m_prefix],
        "linearity_patch8": float(linearity),
        "collapse_sizes": [n for n, _ in collapse],
        "collapse_deltas": [float(d) for _, d in collapse],
    }
    out = os.path.join(ROOT, "tests", "data", "toy_goldens.json")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    atomic_write_text(out, json.dumps(golden, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
