"""Layer masking: run a CNN on only the unmasked part of its input.

Spatial layers (conv, pool) see a neighbor-padded input and propagate a
binary mask through a max pool of the same geometry; elementwise layers act
on the zeroed-out input; residual adds intersect masks. The head (global
average pool, flatten, linear) consumes value * mask with a full
denominator and drops the mask, so everything after it runs normally.
Output values of masked layers are re-multiplied by the propagated mask,
which keeps masked cells at exactly zero and makes the whole pass exactly
insensitive to the content of masked pixels.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import GraphError
from .graph import (ELEMENTWISE_OPS, SPATIAL_OPS, LayerSpec, ModelGraph,
                    apply_layer, layer_weights)
from .tensor import DTYPE, hadamard_broadcast

NEIGHBOR_PAD_EPS = DTYPE(1e-8)

PADDING_MODES = ("neighbor", "zero")


@dataclass(frozen=True)
class Mask:
    """Binary (1,H,W) spatial mask; 1 = unmasked, 0 = masked out."""

    grid: np.ndarray

    def __post_init__(self):
        validate_mask(self.grid)


@dataclass(frozen=True)
class MaskedActivation:
    value: np.ndarray  # (C,H,W)
    mask: np.ndarray   # (1,H,W) binary


@dataclass(frozen=True)
class MaskingConfig:
    padding_mode: str = "neighbor"
    prefix_depth: Optional[int] = None  # None = mask every layer

    def __post_init__(self):
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"padding_mode must be one of {PADDING_MODES}")
        if self.prefix_depth is not None and self.prefix_depth < 0:
            raise ValueError("prefix_depth must be >= 0")


def validate_mask(mask: np.ndarray, spatial=None) -> np.ndarray:
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"mask must be (1,H,W), got {mask.shape}")
    if spatial is not None and mask.shape[1:] != tuple(spatial):
        raise ValueError(f"mask spatial size {mask.shape[1:]} != {tuple(spatial)}")
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("mask entries must be exactly 0 or 1")
    return np.asarray(mask, dtype=DTYPE)


def full_mask(h: int, w: int) -> np.ndarray:
    return np.ones((1, h, w), dtype=DTYPE)


def _box3_sum(x: np.ndarray) -> np.ndarray:
    """Convolution with a 3x3 all-ones filter, zero padded, per channel."""
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += xp[:, di : di + h, dj : dj + w]
    return out


def neighbor_pad_steps(x: np.ndarray, mask: np.ndarray, k: int):
    """Iterates the neighbor-fill k times, returning every intermediate
    (filled, mask) pair; element 0 is the masked input itself.

    One iteration assigns each still-masked cell the average of its unmasked
    8-neighbors (cells with no unmasked neighbor stay 0) and then dilates the
    mask by one step.
    """
    mask = validate_mask(mask, x.shape[1:])
    m = mask.copy()
    filled = hadamard_broadcast(x, m)
    steps = [(filled, m)]
    for _ in range(k):
        num = _box3_sum(filled)
        den = _box3_sum(m)
        fill = (DTYPE(1) - m) * num / (den + NEIGHBOR_PAD_EPS)
        filled = filled + fill
        m = np.minimum(DTYPE(1), m + den)
        steps.append((filled, m))
    return steps


def neighbor_pad(x: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Fill masked cells of x from their unmasked neighborhood, growing the
    filled band one cell per iteration until it is k cells wide."""
    if k < 1:
        raise ValueError("padding width k must be >= 1")
    return neighbor_pad_steps(x, mask, k)[-1][0]


def masked_spatial(apply_fn, kernel: int, stride: int, zero_padding: int,
                   act: MaskedActivation, padding_mode: str = "neighbor") -> MaskedActivation:
    """Masked version of a kernel-k spatial layer.

    The value path runs apply_fn on the neighbor-padded (or, in zero mode,
    merely zeroed) input; the mask path is a max pool with the same kernel,
    stride and zero padding, so an output cell stays unmasked iff any input
    cell in its window was unmasked.
    """
    if padding_mode == "neighbor":
        padded = neighbor_pad(act.value, act.mask, kernel)
    elif padding_mode == "zero":
        padded = hadamard_broadcast(act.value, act.mask)
    else:
        raise ValueError(f"padding_mode must be one of {PADDING_MODES}")
    y = apply_fn(padded)
    m_out = T.maxpool2d(act.mask, kernel, stride, zero_padding)
    return MaskedActivation(hadamard_broadcast(y, m_out), m_out)


def masked_elementwise(apply_fn, act: MaskedActivation) -> MaskedActivation:
    """Masked version of a per-element layer: apply to value * mask, then
    re-mask (this strips e.g. a batchnorm shift from masked cells)."""
    y = apply_fn(hadamard_broadcast(act.value, act.mask))
    return MaskedActivation(hadamard_broadcast(y, act.mask), act.mask)


def masked_add(a: MaskedActivation, b: MaskedActivation) -> MaskedActivation:
    """Residual join: values add, masks intersect, result is re-masked."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    m = a.mask * b.mask
    return MaskedActivation(hadamard_broadcast(a.value + b.value, m), m)


def _collapse(state):
    """Value with masked cells explicitly zeroed; identity for plain arrays."""
    if isinstance(state, MaskedActivation):
        return hadamard_broadcast(state.value, state.mask)
    return state


def _plain(state):
    return state.value if isinstance(state, MaskedActivation) else state


_MASKABLE = set(SPATIAL_OPS) | set(ELEMENTWISE_OPS) | {"add"}


def masked_forward(graph: ModelGraph, store: dict, x: np.ndarray, mask: np.ndarray,
                   config: MaskingConfig = MaskingConfig(), node_masks=None):
    """Run the graph with every layer replaced by its masked counterpart.

    With config.prefix_depth = n, only the first n maskable nodes (in
    topological order; conv/pool/relu/batchnorm/add with a masked input) use
    masked semantics; later nodes run plainly on value * mask with the mask
    discarded. Returns (logits, features) like forward. If node_masks is a
    dict it is filled with the propagated mask of every masked node.
    """
    if tuple(x.shape) != graph.input_shape:
        raise ValueError(f"input shape {x.shape} != graph input {graph.input_shape}")
    mask = validate_mask(mask, graph.input_shape[1:])
    x = np.asarray(x, dtype=DTYPE)

    budget = config.prefix_depth
    maskable_seen = 0
    state = {}
    for layer in graph.layers:
        op = layer.op_kind
        ins = [state[s] for s in layer.inputs]
        any_masked = any(isinstance(v, MaskedActivation) for v in ins)

        if op == "input":
            out = MaskedActivation(hadamard_broadcast(x, mask), mask)
        elif op == "output":
            out = ins[0]
        elif not any_masked:
            out = apply_layer(layer, store, ins)
        elif op in _MASKABLE:
            maskable_seen += 1
            if budget is not None and maskable_seen > budget:
                out = apply_layer(layer, store, [_collapse(v) for v in ins])
            else:
                out = _apply_masked(layer, store, ins, config.padding_mode)
        elif op in ("avgpool_global", "flatten"):
            # head boundary: zero-filled input, full denominator, mask dropped
            out = apply_layer(layer, store, [_collapse(ins[0])])
        else:
            raise GraphError(f"layer '{layer.id}': op '{op}' cannot take a masked input")

        state[layer.id] = out
        if node_masks is not None and isinstance(out, MaskedActivation):
            node_masks[layer.id] = out.mask

    logits = _plain(state[graph.output_id])
    features = _plain(state[graph.feature_tap])
    return logits.copy(), features.reshape(-1).copy()


def _apply_masked(layer: LayerSpec, store: dict, ins, padding_mode: str):
    op = layer.op_kind
    if op == "conv":
        wb = layer_weights(layer, store)
        spec = wb["spec"]
        return masked_spatial(
            lambda xp: T.conv2d(xp, wb["weight"], wb["bias"], spec),
            spec.kernel, spec.stride, spec.zero_padding, ins[0], padding_mode)
    if op == "maxpool":
        k = layer.params["kernel"]
        s = layer.params.get("stride", k)
        p = layer.params.get("zero_padding", 0)
        return masked_spatial(lambda xp: T.maxpool2d(xp, k, s, p), k, s, p,
                              ins[0], padding_mode)
    if op in ELEMENTWISE_OPS:
        return masked_elementwise(lambda xv: apply_layer(layer, store, [xv]), ins[0])
    if op == "add":
        a, b = ins
        if not isinstance(a, MaskedActivation) or not isinstance(b, MaskedActivation):
            # mixed masked/plain join can only happen past the masked prefix
            return apply_layer(layer, store, [_collapse(a), _collapse(b)])
        return masked_add(a, b)
    raise GraphError(f"layer '{layer.id}': no masked form for op '{op}'")


def mask_propagation_oracle(graph: ModelGraph, mask: np.ndarray) -> dict:
    """Reference mask propagation, computed cell by cell from receptive
    fields: an output cell of a spatial layer is unmasked iff any in-bounds
    input cell under its window is unmasked; elementwise layers keep the
    mask; adds intersect. Returns {node id: (1,H,W) mask} for every node up
    to the head. Intentionally shares no code with the max-pool mask path.
    """
    mask = validate_mask(mask, graph.input_shape[1:])
    out: dict = {}
    grids = {}
    for layer in graph.layers:
        op = layer.op_kind
        if op == "input":
            grids[layer.id] = mask[0] > 0
        elif not all(s in grids for s in layer.inputs):
            continue
        elif op in ELEMENTWISE_OPS or op == "output":
            grids[layer.id] = grids[layer.inputs[0]].copy()
        elif op == "add":
            grids[layer.id] = grids[layer.inputs[0]] & grids[layer.inputs[1]]
        elif op in SPATIAL_OPS:
            if op == "conv":
                spec = layer.conv_spec()
                k, s, p = spec.kernel, spec.stride, spec.zero_padding
            else:
                k = layer.params["kernel"]
                s = layer.params.get("stride", k)
                p = layer.params.get("zero_padding", 0)
            m_in = grids[layer.inputs[0]]
            h, w = m_in.shape
            h_out = (h + 2 * p - k) // s + 1
            w_out = (w + 2 * p - k) // s + 1
            m_out = np.zeros((h_out, w_out), dtype=bool)
            for i in range(h_out):
                r0, r1 = max(0, i * s - p), min(h, i * s - p + k)
                for j in range(w_out):
                    c0, c1 = max(0, j * s - p), min(w, j * s - p + k)
                    m_out[i, j] = bool(m_in[r0:r1, c0:c1].any())
            grids[layer.id] = m_out
        else:
            continue  # head reached on this path
        if op != "output":
            out[layer.id] = grids[layer.id][None].astype(DTYPE)
    return out
