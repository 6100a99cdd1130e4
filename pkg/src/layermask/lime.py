"""LIME over segment masks, plus the explanation-quality metrics.

The explainer draws random segment-inclusion vectors, renders each to a
pixel mask, queries a scorer (typically the model's probability for one
class under some masking strategy) and fits a ridge-regularized linear
model; the fitted coefficients are the per-segment importance scores.
Explanation quality is measured against a ground truth derived from a human
object mask: cosine alignment per image and win rate across images.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from . import netpbm
from .errors import RankDeficiencyError
from .parallel import pmap
from .segmentation import SegmentMap
from .tensor import DTYPE


@dataclass
class Explanation:
    scores: np.ndarray  # float64, one per segment
    intercept: float
    n_samples: int
    target_class: int
    seed: int = 0


@dataclass
class GroundTruthExplanation:
    g: np.ndarray  # float64, one per segment
    m_avg: float


def render_segment_mask(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Inclusion vector (count,) in {0,1} -> pixel mask (1,H,W)."""
    return z.astype(DTYPE)[labels][None]


def lime_explain(scorer, seg: SegmentMap, n_samples: int = 500, keep_prob: float = 0.5,
                 ridge_lambda: float = 1e-6, seed: int = 0, target_class: int = 0,
                 threads: int = 1) -> Explanation:
    """Fit per-segment importance scores for a deterministic scorer.

    The sample matrix is drawn up front from the seed; scorer queries are
    independent and may fan out over threads without changing the result.
    The intercept is fitted but not penalized.
    """
    count = seg.count
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if n_samples < count + 1:
        warnings.warn(f"n_samples={n_samples} below segment count {count}+1; "
                      "the fit will be underdetermined", stacklevel=2)
    rng = np.random.default_rng(seed)
    z = (rng.random((n_samples, count)) < keep_prob).astype(np.float64)

    labels = seg.labels
    ys = pmap(lambda row: float(scorer(render_segment_mask(row, labels))), z, threads)
    y = np.asarray(ys, dtype=np.float64)

    design = np.concatenate([z, np.ones((n_samples, 1))], axis=1)
    normal = design.T @ design
    if ridge_lambda:
        normal[np.arange(count), np.arange(count)] += ridge_lambda
    rhs = design.T @ y
    try:
        beta = sla.cho_solve(sla.cho_factor(normal), rhs)
    except np.linalg.LinAlgError as e:
        raise RankDeficiencyError(f"normal equations are rank deficient: {e}") from None
    return Explanation(scores=beta[:count], intercept=float(beta[count]),
                       n_samples=n_samples, target_class=target_class, seed=seed)


def ground_truth(seg: SegmentMap, object_mask: np.ndarray) -> GroundTruthExplanation:
    """Per-segment mass of the mean-centered object mask."""
    if object_mask.shape != seg.labels.shape:
        raise ValueError(f"object mask {object_mask.shape} != labels {seg.labels.shape}")
    m = np.asarray(object_mask, dtype=np.float64)
    m_avg = float(m.mean())
    g = np.bincount(seg.labels.ravel(), weights=(m - m_avg).ravel(), minlength=seg.count)
    return GroundTruthExplanation(g=g, m_avg=m_avg)


def alignment_score(gt: GroundTruthExplanation, expl: Explanation):
    """Cosine similarity of ground truth and scores; None when undefined
    (a zero vector on either side has no direction)."""
    g, s = np.asarray(gt.g, dtype=np.float64), np.asarray(expl.scores, dtype=np.float64)
    if g.shape != s.shape:
        raise ValueError(f"score length {s.shape} != ground truth {g.shape}")
    ng, ns = float(np.dot(g, g)), float(np.dot(s, s))
    if ng == 0.0 or ns == 0.0:
        return None
    return float(np.dot(g, s) / np.sqrt(ng * ns))


def win_rate(per_image) -> dict:
    """Fraction of images each strategy scores best on; exact ties split the
    win equally, so the rates always sum to 1."""
    per_image = list(per_image)
    if not per_image:
        raise ValueError("win_rate needs at least one image")
    strategies = set(per_image[0])
    wins = {s: 0.0 for s in per_image[0]}  # preserve caller's key order
    usable = 0
    for row in per_image:
        if set(row) != strategies:
            raise ValueError("every image must score the same strategy set")
        scored = {s: v for s, v in row.items() if v is not None}
        if not scored:
            continue
        usable += 1
        best = max(scored.values())
        tied = [s for s, v in scored.items() if v == best]
        for s in tied:
            wins[s] += 1.0 / len(tied)
    if usable == 0:
        raise ValueError("no image has a defined alignment score")
    return {s: w / usable for s, w in wins.items()}


def render_overlay(image01: np.ndarray, seg: SegmentMap, expl: Explanation,
                   top_k: int = 10) -> np.ndarray:
    """Tint the top_k segments by |score|: green for positive, red for
    negative, alpha 0.5. Remaining pixels pass through unchanged."""
    if top_k < 0 or top_k > seg.count:
        raise ValueError(f"top_k must lie in [0, {seg.count}]")
    out = image01.astype(DTYPE).copy()
    order = np.argsort(-np.abs(expl.scores), kind="stable")[:top_k]
    green = np.array([0.0, 1.0, 0.0], dtype=DTYPE)[:, None]
    red = np.array([1.0, 0.0, 0.0], dtype=DTYPE)[:, None]
    for idx in order:
        region = seg.labels == idx
        tint = green if expl.scores[idx] >= 0 else red
        out[:, region] = DTYPE(0.5) * out[:, region] + DTYPE(0.5) * tint
    return out


def write_explanation(path, expl: Explanation):
    netpbm.write_json(path, {
        "target_class": int(expl.target_class),
        "intercept": float(expl.intercept),
        "scores": [float(v) for v in expl.scores],
        "n_samples": int(expl.n_samples),
        "seed": int(expl.seed),
    })


def read_explanation(path) -> Explanation:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return Explanation(scores=np.asarray(doc["scores"], dtype=np.float64),
                       intercept=float(doc["intercept"]),
                       n_samples=int(doc["n_samples"]),
                       target_class=int(doc["target_class"]),
                       seed=int(doc.get("seed", 0)))
