"""Experiment harness: saliency-ordered segment ablation, AUC summaries, and
the feature-space diagnostics (linearity in masking, output collapse,
magnitude scaling).

Per-image work items are independent; the harness can fan out over threads
and per-image RNG streams are derived as seed ^ image_index, so results are
identical at any parallelism level.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import netpbm
from .graph import ModelGraph
from .masking import full_mask
from .parallel import pmap
from .perturb import Strategy, evaluate
from .segmentation import SegmentMap, mask_dropping_segments, segment_saliency
from .tensor import DTYPE, bilinear_resize

ABLATION_MODES = ("random", "most_salient_first", "least_salient_first")
FRACTION_GRID = tuple(i / 10 for i in range(11))


@dataclass
class AblationPoint:
    fraction_masked: float
    accuracy: float
    class_entropy: float
    taxonomy_similarity: float
    unchanged_fraction: float


@dataclass
class DatasetItem:
    image01: np.ndarray
    label: int
    saliency: Optional[np.ndarray] = None
    object_mask: Optional[np.ndarray] = None


@dataclass
class DiagnosticsResult:
    linearity_cosine: Optional[float] = None
    collapse_curve: Optional[list] = None   # [(size, mean cosine delta)]
    magnitude_curve: Optional[list] = None  # [(size, mean feature norm)]
    patch_masks: Optional[int] = None


def cosine(a, b) -> float:
    """Cosine similarity in float64; 0.0 for degenerate all-zero vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    num = float(np.dot(a, b))
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        return 0.0
    return num / den


class Hierarchy:
    """A rooted class taxonomy: child -> parents, single self-parented root."""

    def __init__(self, parents: dict):
        roots = [n for n, ps in parents.items() if n in ps]
        if len(roots) != 1:
            raise ValueError(f"hierarchy needs exactly one self-parented root, found {roots}")
        self.root = roots[0]
        self.parents = {n: frozenset(ps) - {n} if n == self.root else frozenset(ps)
                        for n, ps in parents.items()}
        for node, ps in self.parents.items():
            for p in ps:
                if p not in parents:
                    raise ValueError(f"node {node} references unknown parent {p}")
        # shallowest depth, root = 1
        children = {n: [] for n in parents}
        for n, ps in self.parents.items():
            for p in ps:
                children[p].append(n)
        self.depth = {self.root: 1}
        frontier = [self.root]
        while frontier:
            nxt = []
            for n in frontier:
                for c in children[n]:
                    if c not in self.depth:
                        self.depth[c] = self.depth[n] + 1
                        nxt.append(c)
            frontier = nxt
        missing = set(parents) - set(self.depth)
        if missing:
            raise ValueError(f"nodes unreachable from root: {sorted(missing)}")

    @classmethod
    def parse(cls, text: str) -> "Hierarchy":
        parents: dict = {}
        for ln, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"hierarchy line {ln}: expected 'child parent', got '{line}'")
            child, parent = int(parts[0]), int(parts[1])
            parents.setdefault(child, set()).add(parent)
            parents.setdefault(parent, set())
        # nodes seen only as parents still need their own line (or be the root)
        for node, ps in parents.items():
            if not ps:
                raise ValueError(f"node {node} has no parent line (the root must map to itself)")
        return cls(parents)

    @classmethod
    def flat(cls, class_ids) -> "Hierarchy":
        """Degenerate taxonomy: every class is a direct child of one root (-1)."""
        parents = {-1: {-1}}
        for cid in class_ids:
            parents[int(cid)] = {-1}
        return cls(parents)

    def ancestors(self, node) -> set:
        if node not in self.parents:
            raise ValueError(f"unknown class id {node}")
        seen = {node}
        frontier = [node]
        while frontier:
            n = frontier.pop()
            for p in self.parents[n]:
                if p not in seen:
                    seen.add(p)
                    frontier.append(p)
        return seen


def taxonomy_similarity(pred: int, label: int, hierarchy: Hierarchy) -> float:
    """Wu-Palmer similarity: 2 * depth(lcs) / (depth(pred) + depth(label))."""
    common = hierarchy.ancestors(pred) & hierarchy.ancestors(label)
    lcs_depth = max(hierarchy.depth[n] for n in common)
    return 2.0 * lcs_depth / (hierarchy.depth[pred] + hierarchy.depth[label])


def class_entropy(predictions) -> float:
    """Entropy (nats) of the empirical distribution of predicted classes."""
    preds = np.asarray(list(predictions), dtype=np.int64)
    if preds.size == 0:
        raise ValueError("class_entropy needs at least one prediction")
    counts = np.bincount(preds)
    p = counts[counts > 0] / preds.size
    return float(-(p * np.log(p)).sum()) + 0.0  # avoid -0.0 for a single class


def unchanged_fraction(base_preds, masked_preds) -> float:
    a = np.asarray(list(base_preds))
    b = np.asarray(list(masked_preds))
    if a.shape != b.shape:
        raise ValueError(f"prediction lists differ in length: {a.shape} vs {b.shape}")
    return float((a == b).mean())


def auc(curve) -> float:
    """Trapezoidal area under a (fraction, value) curve."""
    pts = list(curve)
    if len(pts) < 2:
        raise ValueError("auc needs at least two points")
    fs = [float(f) for f, _ in pts]
    vs = [float(v) for _, v in pts]
    if any(f1 >= f2 for f1, f2 in zip(fs, fs[1:])):
        raise ValueError("fractions must be strictly increasing")
    return float(sum(0.5 * (v0 + v1) * (f1 - f0)
                     for f0, f1, v0, v1 in zip(fs, fs[1:], vs, vs[1:])))


def ablation_order(scores, mode: str, seed: int = 0) -> np.ndarray:
    """Segment visit order: stable sort with ties broken by ascending index,
    or a seeded uniform shuffle for mode 'random'."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("need at least one segment score")
    if mode == "random":
        return np.random.default_rng(seed).permutation(scores.size)
    if mode == "most_salient_first":
        return np.argsort(-scores, kind="stable")
    if mode == "least_salient_first":
        return np.argsort(scores, kind="stable")
    raise ValueError(f"unknown ablation mode '{mode}'")


def _drop_count(fraction: float, count: int) -> int:
    # tiny slack so binary-float grids like 0.3 never over-round the ceiling
    return min(count, max(0, math.ceil(fraction * count - 1e-9)))


def ablation_curve(graph: ModelGraph, store: dict, items, segmenter, strategy: Strategy,
                   mode: str, fractions=FRACTION_GRID, hierarchy: Optional[Hierarchy] = None,
                   seed: int = 0, threads: int = 1):
    """Mask out a growing fraction of segments per image and track accuracy,
    class entropy, taxonomy similarity and unchanged predictions."""
    items = list(items)
    if not items:
        raise ValueError("ablation_curve needs at least one dataset item")
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode '{mode}'")
    fractions = [float(f) for f in fractions]
    if mode != "random":
        for i, item in enumerate(items):
            if item.saliency is None:
                raise ValueError(f"item {i}: saliency map required for mode '{mode}'")
    if hierarchy is None:
        hierarchy = Hierarchy.flat(range(graph.shapes[graph.output_id][0]))

    h, w = graph.input_shape[1:]

    def run_item(arg):
        i, item = arg
        seg = segmenter(item.image01)
        if mode == "random":
            scores = np.zeros(seg.count)
        else:
            scores = segment_saliency(seg, item.saliency)
        order = ablation_order(scores, mode, seed=seed ^ i)
        base_logits, _ = evaluate(graph, store, item.image01, full_mask(h, w), strategy)
        base_pred = int(np.argmax(base_logits))
        preds = []
        for f in fractions:
            n_drop = _drop_count(f, seg.count)
            if n_drop == 0:
                preds.append(base_pred)
                continue
            mask = mask_dropping_segments(seg, order[:n_drop])
            logits, _ = evaluate(graph, store, item.image01, mask, strategy)
            preds.append(int(np.argmax(logits)))
        return base_pred, preds

    results = pmap(run_item, enumerate(items), threads)
    base_preds = [r[0] for r in results]
    labels = [int(it.label) for it in items]

    points = []
    for fi, f in enumerate(fractions):
        preds = [r[1][fi] for r in results]
        points.append(AblationPoint(
            fraction_masked=f,
            accuracy=float(np.mean([p == l for p, l in zip(preds, labels)])),
            class_entropy=class_entropy(preds),
            taxonomy_similarity=float(np.mean(
                [taxonomy_similarity(p, l, hierarchy) for p, l in zip(preds, labels)])),
            unchanged_fraction=unchanged_fraction(base_preds, preds),
        ))
    return points


# --------------------------------------------------------------------------
# Feature-space diagnostics

def linearity_test(graph: ModelGraph, store: dict, image01: np.ndarray, patch_size: int,
                   strategy: Strategy, threads: int = 1) -> float:
    """Cosine between full-input features and the sum of per-patch masked
    features; 1 means the masking behaves additively over disjoint patches."""
    from .segmentation import grid_patches

    h, w = graph.input_shape[1:]
    seg = grid_patches(h, w, patch_size)
    _, f_full = evaluate(graph, store, image01, full_mask(h, w), strategy)

    def one_patch(idx):
        mask = (seg.labels == idx)[None].astype(DTYPE)
        _, feats = evaluate(graph, store, image01, mask, strategy)
        return feats.astype(np.float64)

    parts = pmap(one_patch, range(seg.count), threads)
    total = np.zeros(f_full.shape, dtype=np.float64)
    for part in parts:
        total += part
    return cosine(f_full, total)


def _corner_embed(image01: np.ndarray, n: int, full: int):
    """Resize to n x n, zero-pad back to full size at the top-left corner."""
    canvas = np.zeros((image01.shape[0], full, full), dtype=DTYPE)
    canvas[:, :n, :n] = bilinear_resize(image01, n, n)
    mask = np.zeros((1, full, full), dtype=DTYPE)
    mask[:, :n, :n] = 1
    return canvas, mask


def collapse_test(graph: ModelGraph, store: dict, image_pairs, sizes,
                  strategy: Strategy, threads: int = 1):
    """Mean change in pairwise feature cosine when both images are shrunk to
    n x n and masked down to that region; 0 everywhere means no collapse."""
    h, w = graph.input_shape[1:]
    if h != w:
        raise ValueError(f"collapse test needs a square input, graph has {h}x{w}")
    pairs = list(image_pairs)
    for x1, x2 in pairs:
        if x1.shape[1:] != (h, w) or x2.shape[1:] != (h, w):
            raise ValueError("collapse test images must match the graph input size")

    def run_pair(pair):
        x1, x2 = pair
        _, f1 = evaluate(graph, store, x1, full_mask(h, w), strategy)
        _, f2 = evaluate(graph, store, x2, full_mask(h, w), strategy)
        c = cosine(f1, f2)
        deltas = []
        for n in sizes:
            a, mask = _corner_embed(x1, n, h)
            b, _ = _corner_embed(x2, n, h)
            _, g1 = evaluate(graph, store, a, mask, strategy)
            _, g2 = evaluate(graph, store, b, mask, strategy)
            deltas.append(cosine(g1, g2) - c)
        return deltas

    all_deltas = pmap(run_pair, pairs, threads)
    means = np.mean(np.asarray(all_deltas, dtype=np.float64), axis=0)
    return [(int(n), float(d)) for n, d in zip(sizes, means)]


def magnitude_test(graph: ModelGraph, store: dict, images, sizes,
                   strategy: Strategy, threads: int = 1):
    """Mean feature norm when only a centered n x n square stays unmasked."""
    h, w = graph.input_shape[1:]
    sizes = [int(n) for n in sizes]
    for n in sizes:
        if n < 0 or n > min(h, w):
            raise ValueError(f"size {n} outside [0, {min(h, w)}]")

    def run_image(image01):
        norms = []
        for n in sizes:
            mask = np.zeros((1, h, w), dtype=DTYPE)
            if n > 0:
                r0, c0 = (h - n) // 2, (w - n) // 2
                mask[:, r0:r0 + n, c0:c0 + n] = 1
            _, feats = evaluate(graph, store, image01, mask, strategy)
            norms.append(float(np.linalg.norm(feats.astype(np.float64))))
        return norms

    per_image = pmap(run_image, list(images), threads)
    means = np.mean(np.asarray(per_image, dtype=np.float64), axis=0)
    return [(n, float(v)) for n, v in zip(sizes, means)]


# --------------------------------------------------------------------------
# Dataset manifests (JSON lines)

def load_manifest(path) -> list:
    """JSONL manifest -> DatasetItems. Paths resolve relative to the manifest."""
    import json
    import os

    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"manifest line {ln}: bad JSON: {e}") from None
            if "image" not in doc or "label" not in doc:
                raise ValueError(f"manifest line {ln}: needs 'image' and 'label'")

            def respath(p):
                return p if os.path.isabs(p) else os.path.join(base, p)

            item = DatasetItem(
                image01=netpbm.read_ppm(respath(doc["image"])),
                label=int(doc["label"]),
            )
            if doc.get("saliency"):
                item.saliency = netpbm.read_pgm(respath(doc["saliency"]))
            if doc.get("object_mask"):
                item.object_mask = netpbm.read_pgm(respath(doc["object_mask"]))
            items.append(item)
    if not items:
        raise ValueError(f"manifest {path} is empty")
    return items
