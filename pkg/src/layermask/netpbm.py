"""Netpbm image I/O: PPM P6 (color), PGM P5 (binary gray), PGM P2 (ASCII labels).

All writers go through an atomic temp-file + rename so interrupted runs never
leave partial outputs behind.
"""

import json
import os
import tempfile

import numpy as np

from .errors import FileFormatError
from .tensor import DTYPE


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _parse_header(data: bytes, magic: bytes):
    """Return (width, height, maxval, offset of first payload byte)."""
    if not data.startswith(magic):
        raise FileFormatError(f"expected {magic.decode()} file")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FileFormatError("truncated netpbm header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FileFormatError("unterminated comment in netpbm header")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            try:
                fields.append(int(data[pos:end]))
            except ValueError:
                raise FileFormatError(f"bad netpbm header token {data[pos:end]!r}") from None
            pos = end
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FileFormatError("missing separator after netpbm maxval")
    w, h, maxval = fields
    if w < 1 or h < 1 or maxval < 1 or maxval > 65535:
        raise FileFormatError(f"bad netpbm dimensions {w}x{h} maxval {maxval}")
    return w, h, maxval, pos + 1


def _read_samples(data: bytes, offset: int, count: int, maxval: int) -> np.ndarray:
    wide = maxval > 255
    need = count * (2 if wide else 1)
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise FileFormatError("truncated netpbm payload")
    raw = np.frombuffer(payload, dtype=">u2" if wide else np.uint8)
    return raw.astype(np.float32)


def read_ppm(path) -> np.ndarray:
    """P6 file -> float32 (3,H,W) in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _parse_header(data, b"P6")
    raw = _read_samples(data, off, w * h * 3, maxval)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1) / DTYPE(maxval)
    return img.astype(DTYPE)


def write_ppm(path, image01: np.ndarray):
    """float32 (3,H,W) in [0,1] -> 8-bit P6 file."""
    if image01.ndim != 3 or image01.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3,H,W), got {image01.shape}")
    u8 = np.clip(np.rint(image01 * 255.0), 0, 255).astype(np.uint8)
    h, w = image01.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode()
    atomic_write_bytes(path, header + u8.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> np.ndarray:
    """P5 file -> float32 (H,W) scaled to [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _parse_header(data, b"P5")
    raw = _read_samples(data, off, w * h, maxval)
    return (raw.reshape(h, w) / DTYPE(maxval)).astype(DTYPE)


def read_mask_pgm(path) -> np.ndarray:
    """P5 file -> binary (1,H,W) mask; sample >= 128 (of 255) means unmasked."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _parse_header(data, b"P5")
    raw = _read_samples(data, off, w * h, maxval)
    thresh = 128.0 * (maxval / 255.0)
    return (raw.reshape(1, h, w) >= thresh).astype(DTYPE)


def write_pgm(path, gray01: np.ndarray):
    """float32 (H,W) in [0,1] -> 8-bit P5 file."""
    if gray01.ndim != 2:
        raise ValueError(f"write_pgm expects (H,W), got {gray01.shape}")
    u8 = np.clip(np.rint(gray01 * 255.0), 0, 255).astype(np.uint8)
    h, w = gray01.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + u8.tobytes())


def write_pgm_ascii(path, values: np.ndarray):
    """Integer (H,W) array -> P2 file, used for segment label maps."""
    if values.ndim != 2:
        raise ValueError(f"write_pgm_ascii expects (H,W), got {values.shape}")
    vmax = int(values.max()) if values.size else 0
    if vmax > 65535 or values.min() < 0:
        raise ValueError("P2 values must lie in [0, 65535]")
    h, w = values.shape
    lines = [f"P2\n{w} {h}\n{max(1, vmax)}"]
    for row in values:
        lines.append(" ".join(str(int(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_pgm_ascii(path) -> np.ndarray:
    """P2 file -> int32 (H,W) array of raw values."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P2"):
        raise FileFormatError("expected P2 file")
    body = b"\n".join(
        line.split(b"#", 1)[0] for line in data[2:].split(b"\n")
    )
    tokens = body.split()
    if len(tokens) < 3:
        raise FileFormatError("truncated P2 header")
    try:
        w, h, _maxval = (int(t) for t in tokens[:3])
        values = np.array([int(t) for t in tokens[3:]], dtype=np.int32)
    except ValueError:
        raise FileFormatError("bad P2 token") from None
    if values.size != w * h:
        raise FileFormatError(f"P2 payload has {values.size} values, expected {w * h}")
    return values.reshape(h, w)


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")
