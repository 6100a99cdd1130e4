"""Masking strategies and the shared evaluation entry point.

Pixel strategies overwrite masked pixels with a baseline color in [0,1]
space before normalization; layer masking normalizes first and then runs
the masked forward pass. Either way the result depends only on the unmasked
pixels, the mask, and the strategy.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .graph import ModelGraph, forward
from .masking import MaskingConfig, masked_forward, validate_mask
from .tensor import DTYPE

PIXEL_KINDS = ("blackout", "greyout", "constant_color", "image_mean")
LAYER_MASKING = "layer_masking"


@dataclass(frozen=True)
class Normalization:
    """Per-channel preprocessing: x_norm = (x - mean) / std, in [0,1] units."""

    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization needs 3 mean and 3 std components")
        if min(self.std) <= 0:
            raise ValueError("normalization std components must be > 0")

    def mean_array(self):
        return np.asarray(self.mean, dtype=DTYPE)[:, None, None]

    def std_array(self):
        return np.asarray(self.std, dtype=DTYPE)[:, None, None]


IMAGENET_NORM = Normalization((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


@dataclass(frozen=True)
class Strategy:
    kind: str
    normalization: Normalization = IMAGENET_NORM
    color: Optional[Tuple[float, float, float]] = None
    masking: Optional[MaskingConfig] = None

    def __post_init__(self):
        if self.kind not in PIXEL_KINDS + (LAYER_MASKING,):
            raise ValueError(f"unknown strategy kind '{self.kind}'")
        if self.kind == "constant_color":
            if self.color is None or len(self.color) != 3:
                raise ValueError("constant_color needs an (r,g,b) color")
            if min(self.color) < 0 or max(self.color) > 1:
                raise ValueError("constant_color components must lie in [0,1]")
        if self.kind == LAYER_MASKING and self.masking is None:
            object.__setattr__(self, "masking", MaskingConfig())


def parse_strategy(text: str, normalization: Normalization = IMAGENET_NORM) -> Strategy:
    """Parse `blackout|greyout|color:R,G,B|imagemean|layermask[:zero][:prefix=N]`."""
    head, _, rest = text.partition(":")
    if head == "blackout":
        return Strategy("blackout", normalization)
    if head == "greyout":
        return Strategy("greyout", normalization)
    if head == "imagemean":
        return Strategy("image_mean", normalization)
    if head == "color":
        parts = rest.split(",")
        if len(parts) != 3:
            raise ValueError(f"bad color spec '{text}', expected color:R,G,B")
        return Strategy("constant_color", normalization, color=tuple(float(p) for p in parts))
    if head == "layermask":
        padding_mode, prefix = "neighbor", None
        for token in filter(None, rest.split(":")):
            if token == "zero":
                padding_mode = "zero"
            elif token == "neighbor":
                padding_mode = "neighbor"
            elif token.startswith("prefix="):
                prefix = int(token[len("prefix="):])
            else:
                raise ValueError(f"unknown layermask option '{token}'")
        return Strategy(LAYER_MASKING, normalization,
                        masking=MaskingConfig(padding_mode, prefix))
    raise ValueError(f"unknown strategy '{text}'")


def strategy_label(strategy: Strategy) -> str:
    """Canonical CLI spelling of a strategy, used to key CSV rows."""
    if strategy.kind == "blackout":
        return "blackout"
    if strategy.kind == "greyout":
        return "greyout"
    if strategy.kind == "image_mean":
        return "imagemean"
    if strategy.kind == "constant_color":
        return "color:" + ",".join(f"{c:g}" for c in strategy.color)
    label = "layermask"
    if strategy.masking.padding_mode == "zero":
        label += ":zero"
    if strategy.masking.prefix_depth is not None:
        label += f":prefix={strategy.masking.prefix_depth}"
    return label


def normalize(image01: np.ndarray, norm: Normalization) -> np.ndarray:
    return ((image01 - norm.mean_array()) / norm.std_array()).astype(DTYPE)


def apply_pixel_strategy(image01: np.ndarray, mask: np.ndarray, strategy: Strategy) -> np.ndarray:
    """Overwrite masked pixels with the strategy's baseline color."""
    if strategy.kind not in PIXEL_KINDS:
        raise ValueError(f"'{strategy.kind}' is not a pixel strategy")
    mask = validate_mask(mask, image01.shape[1:])
    if strategy.kind == "blackout":
        fill = np.zeros((3, 1, 1), dtype=DTYPE)
    elif strategy.kind == "greyout":
        fill = strategy.normalization.mean_array()
    elif strategy.kind == "constant_color":
        fill = np.asarray(strategy.color, dtype=DTYPE)[:, None, None]
    else:  # image_mean over unmasked pixels; fully masked falls back to greyout
        n_unmasked = mask.sum(dtype=DTYPE)
        if n_unmasked == 0:
            fill = strategy.normalization.mean_array()
        else:
            sums = (image01 * mask).reshape(3, -1).sum(axis=1, dtype=DTYPE)
            fill = (sums / n_unmasked)[:, None, None]
    return (image01 * mask + fill * (DTYPE(1) - mask)).astype(DTYPE)


def evaluate(graph: ModelGraph, store: dict, image01: np.ndarray, mask: np.ndarray,
             strategy: Strategy):
    """Shared dispatch for every experiment: returns (logits, features)."""
    if strategy.kind == LAYER_MASKING:
        x = normalize(image01, strategy.normalization)
        return masked_forward(graph, store, x, mask, strategy.masking)
    x = normalize(apply_pixel_strategy(image01, mask, strategy), strategy.normalization)
    return forward(graph, store, x)
