"""Image segmentation: square grid patches, SLIC superpixels, quickshift.

All three are deterministic: grid seeding and fixed iteration counts for
SLIC, scan-order tie breaking for quickshift. Exact numeric parity with any
external library is a non-goal; the target is the usual segment-count regime
(roughly 200 segments on a 224x224 natural image with default parameters).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import netpbm
from .tensor import DTYPE


@dataclass
class SegmentMap:
    """Per-pixel labels in [0, count); every label occurs at least once."""

    labels: np.ndarray  # (H,W) int32
    count: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        uniq = np.unique(labels)
        if uniq.size != self.count or uniq[0] != 0 or uniq[-1] != self.count - 1:
            raise ValueError(
                f"labels must cover 0..{self.count - 1}, found {uniq.size} distinct values")
        object.__setattr__(self, "labels", labels)


def _compact(labels: np.ndarray) -> SegmentMap:
    uniq, inverse = np.unique(labels, return_inverse=True)
    return SegmentMap(inverse.reshape(labels.shape).astype(np.int32), int(uniq.size))


def grid_patches(h: int, w: int, patch_size: int = 16) -> SegmentMap:
    """Row-major square patches; right/bottom patches may be ragged."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    rows = np.arange(h) // patch_size
    cols = np.arange(w) // patch_size
    n_cols = int(cols[-1]) + 1
    labels = (rows[:, None] * n_cols + cols[None, :]).astype(np.int32)
    return SegmentMap(labels, int(labels[-1, -1]) + 1)


# sRGB (D65) -> CIELAB, the color space both clustering algorithms work in.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(image01: np.ndarray) -> np.ndarray:
    """(3,H,W) sRGB in [0,1] -> (3,H,W) CIELAB (L in [0,100])."""
    if image01.ndim != 3 or image01.shape[0] != 3:
        raise ValueError(f"rgb_to_lab expects (3,H,W), got {image01.shape}")
    c = np.clip(image01.astype(np.float64), 0.0, 1.0)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,jhw->ihw", _RGB_TO_XYZ, lin) / _WHITE[:, None, None]
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab


def slic(image01: np.ndarray, n_segments: int = 196, compactness: float = 10.0,
         max_iters: int = 10) -> SegmentMap:
    """Local k-means over (Lab color, position) seeded on a regular grid.

    After the fixed number of iterations, disconnected leftovers of each
    cluster are merged into the adjacent segment they touch most, so the
    result is always a full partition.
    """
    lab = rgb_to_lab(image01)
    h, w = image01.shape[1:]
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if n_segments > h * w:
        raise ValueError(f"n_segments {n_segments} exceeds pixel count {h * w}")

    spacing = math.sqrt(h * w / n_segments)
    ny = max(1, round(h / spacing))
    nx = max(1, round(w / spacing))
    centers = []  # (l, a, b, y, x)
    for i in range(ny):
        cy = (i + 0.5) * h / ny
        for j in range(nx):
            cx = (j + 0.5) * w / nx
            py, px = min(h - 1, int(cy)), min(w - 1, int(cx))
            centers.append([lab[0, py, px], lab[1, py, px], lab[2, py, px], cy, cx])
    centers = np.array(centers)

    spatial_w = (compactness / spacing) ** 2
    radius = int(1.5 * spacing) + 1
    ygrid = np.arange(h, dtype=np.float64)
    xgrid = np.arange(w, dtype=np.float64)
    labels = np.zeros((h, w), dtype=np.int32)

    for _ in range(max_iters):
        dist = np.full((h, w), np.inf)
        labels.fill(0)
        for ci, (cl, ca, cb, cy, cx) in enumerate(centers):
            y0, y1 = max(0, int(cy) - radius), min(h, int(cy) + radius + 1)
            x0, x1 = max(0, int(cx) - radius), min(w, int(cx) + radius + 1)
            win = lab[:, y0:y1, x0:x1]
            dc = (win[0] - cl) ** 2 + (win[1] - ca) ** 2 + (win[2] - cb) ** 2
            ds = (ygrid[y0:y1, None] - cy) ** 2 + (xgrid[None, x0:x1] - cx) ** 2
            d = dc + spatial_w * ds
            view = dist[y0:y1, x0:x1]
            better = d < view  # strict: ties keep the lowest center index
            np.copyto(view, d, where=better)
            np.copyto(labels[y0:y1, x0:x1], ci, where=better)
        # pixels outside every window (possible after large center drift)
        if np.isinf(dist).any():
            miss = np.argwhere(np.isinf(dist))
            for y, x in miss:
                ds = (centers[:, 3] - y) ** 2 + (centers[:, 4] - x) ** 2
                labels[y, x] = int(np.argmin(ds))
        # recenter
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        occupied = counts > 0
        for feat, plane in enumerate((lab[0], lab[1], lab[2],
                                      np.broadcast_to(ygrid[:, None], (h, w)),
                                      np.broadcast_to(xgrid[None, :], (h, w)))):
            sums = np.bincount(flat, weights=plane.ravel(), minlength=len(centers))
            centers[occupied, feat] = sums[occupied] / counts[occupied]

    return _compact(_merge_orphans(labels))


def _merge_orphans(labels: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component of each label; fold every other
    component into the neighboring label it shares the longest border with."""
    out = labels.copy()
    for lbl in np.unique(labels):
        region = out == lbl
        comp, n = ndimage.label(region)
        if n <= 1:
            continue
        sizes = ndimage.sum_labels(region, comp, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        for ci in range(1, n + 1):
            if ci == keep:
                continue
            piece = comp == ci
            border = ndimage.binary_dilation(piece) & ~piece
            neigh = out[border]
            if neigh.size == 0:
                continue
            out[piece] = np.argmax(np.bincount(neigh))
    return out


def quickshift(image01: np.ndarray, kernel_size: float = 2.0, max_dist: float = 200.0,
               ratio: float = 0.2) -> SegmentMap:
    """Mode seeking on the joint (ratio-scaled Lab, position) space.

    Each pixel gets a Gaussian kernel density estimate over a local window
    (radius 3 * kernel_size) and links to its nearest neighbor of higher
    density within max_dist; link trees become the segments. Density ties
    break toward the smaller (row, col) pixel so output is deterministic.
    """
    if kernel_size <= 0:
        raise ValueError("kernel_size must be > 0")
    feats = rgb_to_lab(image01) * ratio
    h, w = image01.shape[1:]
    radius = int(math.ceil(3 * kernel_size))
    inv_two_sigma2 = 1.0 / (2.0 * kernel_size * kernel_size)

    offsets = [(du, dv) for du in range(-radius, radius + 1)
               for dv in range(-radius, radius + 1)]

    def spans(du, dv):
        a0, a1 = max(0, -du), h - max(0, du)
        c0, c1 = max(0, -dv), w - max(0, dv)
        if a0 >= a1 or c0 >= c1:  # offset exceeds the image; no overlap
            return None
        return (slice(a0, a1), slice(c0, c1)), (slice(a0 + du, a1 + du), slice(c0 + dv, c1 + dv))

    density = np.zeros((h, w))
    for du, dv in offsets:
        if spans(du, dv) is None:
            continue
        (pr, pc), (qr, qc) = spans(du, dv)
        diff = feats[:, qr, qc] - feats[:, pr, pc]
        d2 = (diff * diff).sum(axis=0) + (du * du + dv * dv)
        density[pr, pc] += np.exp(-d2 * inv_two_sigma2)

    flat_idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    parent = flat_idx.copy()
    best = np.full((h, w), np.inf)
    for du, dv in offsets:
        if (du == 0 and dv == 0) or spans(du, dv) is None:
            continue
        (pr, pc), (qr, qc) = spans(du, dv)
        diff = feats[:, qr, qc] - feats[:, pr, pc]
        d = np.sqrt((diff * diff).sum(axis=0) + (du * du + dv * dv))
        q_dens, p_dens = density[qr, qc], density[pr, pc]
        earlier = du < 0 or (du == 0 and dv < 0)  # q precedes p in scan order
        higher = (q_dens > p_dens) if not earlier else (q_dens >= p_dens)
        cand = higher & (d <= max_dist) & (d < best[pr, pc])
        np.copyto(best[pr, pc], d, where=cand)
        np.copyto(parent[pr, pc], flat_idx[qr, qc], where=cand)

    roots = parent.ravel()
    while True:
        hop = roots[roots]
        if np.array_equal(hop, roots):
            break
        roots = hop
    _, inverse = np.unique(roots, return_inverse=True)
    return SegmentMap(inverse.reshape(h, w).astype(np.int32), int(inverse.max()) + 1)


def segment_saliency(seg: SegmentMap, saliency: np.ndarray) -> np.ndarray:
    """Per-segment sum of the pixel saliency values (float64)."""
    if saliency.shape != seg.labels.shape:
        raise ValueError(f"saliency {saliency.shape} != labels {seg.labels.shape}")
    return np.bincount(seg.labels.ravel(),
                       weights=np.asarray(saliency, dtype=np.float64).ravel(),
                       minlength=seg.count)


def mask_dropping_segments(seg: SegmentMap, segment_ids) -> np.ndarray:
    """(1,H,W) binary mask that masks out the given segments."""
    drop = np.isin(seg.labels, np.asarray(list(segment_ids), dtype=np.int32))
    return (~drop)[None].astype(DTYPE)


def write_segment_map(pgm_path, json_path, seg: SegmentMap, algorithm: str, params: dict):
    netpbm.write_pgm_ascii(pgm_path, seg.labels)
    netpbm.write_json(json_path, {"count": seg.count, "algorithm": algorithm, "params": params})


def read_segment_map(pgm_path) -> SegmentMap:
    labels = netpbm.read_pgm_ascii(pgm_path)
    return SegmentMap(labels, int(labels.max()) + 1)
