"""Dense float32 tensor kernels.

Activations are numpy float32 arrays, channels-first (C, H, W). Every kernel
here uses a fixed summation order (channel-major, then kernel rows, then
kernel columns) so repeated calls are bit-identical; nothing is delegated to
BLAS reductions whose order could vary with threading.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

DTYPE = np.float32


def ensure_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def as_tensor(data) -> np.ndarray:
    """Coerce to a float32 array (row-major copy only if needed)."""
    return np.ascontiguousarray(data, dtype=DTYPE)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a square convolution: kernel k, stride s, zero padding p."""

    out_channels: int
    in_channels: int
    kernel: int
    stride: int = 1
    zero_padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.zero_padding < 0:
            raise ValueError(f"bad conv geometry: {self}")
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError(f"bad conv channels: {self}")


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    out = (n + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"window k={kernel} s={stride} p={padding} does not fit input size {n}"
        )
    return out


def conv2d(x: np.ndarray, weights: np.ndarray, bias, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation of a (C,H,W) input with (O,C,k,k) weights.

    Accumulates in float32 with a fixed loop nest over (channel, kernel row,
    kernel column), so the result is deterministic bit for bit.
    """
    if x.ndim != 3:
        raise ValueError(f"conv2d expects (C,H,W), got {x.shape}")
    o, c, kh, kw = weights.shape
    if kh != kw or kh != spec.kernel or o != spec.out_channels or c != spec.in_channels:
        raise ValueError(f"weights {weights.shape} inconsistent with {spec}")
    if x.shape[0] != c:
        raise ValueError(f"input has {x.shape[0]} channels, weights expect {c}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")

    k, s, p = spec.kernel, spec.stride, spec.zero_padding
    h_out = conv_output_size(x.shape[1], k, s, p)
    w_out = conv_output_size(x.shape[2], k, s, p)

    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    out = np.zeros((o, h_out, w_out), dtype=DTYPE)
    for ci in range(c):
        plane = xp[ci]
        for di in range(k):
            for dj in range(k):
                patch = plane[di : di + s * h_out : s, dj : dj + s * w_out : s]
                out += weights[:, ci, di, dj][:, None, None] * patch[None, :, :]
    if bias is not None:
        out += bias[:, None, None]
    return ensure_finite(out, "conv2d output")


def maxpool2d(x: np.ndarray, kernel: int, stride: int, zero_padding: int = 0) -> np.ndarray:
    """Per-window maximum. Padded cells contribute 0, which is the neutral
    element for the nonnegative binary-mask path that pools are also used on."""
    if x.ndim != 3:
        raise ValueError(f"maxpool2d expects (C,H,W), got {x.shape}")
    k, s, p = kernel, stride, zero_padding
    h_out = conv_output_size(x.shape[1], k, s, p)
    w_out = conv_output_size(x.shape[2], k, s, p)
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    out = None
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di : di + s * h_out : s, dj : dj + s * w_out : s]
            out = patch.copy() if out is None else np.maximum(out, patch)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps) -> np.ndarray:
    """Per-channel gamma * (x - mean) / sqrt(var + eps) + beta, inference stats."""
    c = x.shape[0]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", running_mean), ("var", running_var)):
        if v.shape != (c,):
            raise ValueError(f"batchnorm {name} shape {v.shape} != ({c},)")
    inv = DTYPE(1) / np.sqrt(running_var + DTYPE(eps))
    scale = (gamma * inv)[:, None, None]
    shift = beta[:, None, None]
    return ensure_finite((x - running_mean[:, None, None]) * scale + shift, "batchnorm output")


def hadamard_broadcast(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise x * mask with the (1,H,W) mask broadcast over channels."""
    if mask.shape[0] != 1 or mask.shape[1:] != x.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not broadcast over {x.shape}")
    return x * mask


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def linear(x: np.ndarray, weight: np.ndarray, bias) -> np.ndarray:
    """weight @ x + bias for a 1-D x, computed as multiply + fixed-axis sum
    to keep the accumulation order independent of BLAS threading."""
    if x.ndim != 1:
        raise ValueError(f"linear expects a vector, got {x.shape}")
    out_f, in_f = weight.shape
    if x.shape[0] != in_f:
        raise ValueError(f"linear input {x.shape[0]} != weight in_features {in_f}")
    y = (weight * x[None, :]).sum(axis=1, dtype=DTYPE)
    if bias is not None:
        if bias.shape != (out_f,):
            raise ValueError(f"bias shape {bias.shape} != ({out_f},)")
        y = y + bias
    return ensure_finite(y, "linear output")


def global_avgpool(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over all H*W cells (full denominator)."""
    if x.ndim != 3:
        raise ValueError(f"global_avgpool expects (C,H,W), got {x.shape}")
    return x.reshape(x.shape[0], -1).mean(axis=1, dtype=DTYPE)


def bilinear_resize(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Half-pixel (align-corners-false) bilinear resampling of a (C,H,W) tensor."""
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be >= 1")
    c, h, w = x.shape
    if (new_h, new_w) == (h, w):
        return x.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = (src - lo).astype(DTYPE)
        i0 = np.clip(lo, 0, n_in - 1)
        i1 = np.clip(lo + 1, 0, n_in - 1)
        return i0, i1, frac

    r0, r1, fr = axis_weights(h, new_h)
    c0, c1, fc = axis_weights(w, new_w)

    rows = x[:, r0, :] * (DTYPE(1) - fr)[None, :, None] + x[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (DTYPE(1) - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]
    return ensure_finite(out.astype(DTYPE, copy=False), "bilinear_resize output")
