"""Binary PPM (P6, 8-bit) and optional PNG image I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(image):
    """[0, 1] floats -> uint8 with round-half-to-even on ``255 x``."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image):
    data = to_uint8(image)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=-1)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {data.shape}")
    h, w = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())
    return path


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos


def read_ppm(path):
    """Read a binary P6 file as an ``(H, W, 3)`` uint8 array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    n = w * h * 3
    if len(buf) - pos < n:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3).copy()


def write_png(path, image):
    from PIL import Image

    data = to_uint8(image)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)
    return path
