"""Grayscale PGM I/O and the fixed-size model input transform.

Images are stored as binary 8-bit PGM (P5). The writer emits a canonical
header so files are byte-reproducible; the reader accepts standard P5 with
optional comment lines. Model input is a (3, H, W) float tensor in [0, 1]:
grayscale pixels replicated across 3 channels after a plain bilinear resize
that ignores aspect ratio.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    """Raised for files that are not valid binary PGM."""


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (H, W) uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise PgmError(f"{path}: not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    if pixels.size != h * w:
        raise PgmError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (H, W) float array using half-pixel centers."""
    h, w = pixels.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bot = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def to_model_input(gray: np.ndarray, height: int, width: int) -> np.ndarray:
    """(H, W) uint8 or float grayscale -> (3, height, width) float64 in [0, 1]."""
    pixels = gray.astype(np.float64)
    if gray.dtype == np.uint8:
        pixels /= 255.0
    if pixels.shape != (height, width):
        pixels = resize_bilinear(pixels, height, width)
    pixels = np.clip(pixels, 0.0, 1.0)
    return np.broadcast_to(pixels, (3, height, width)).copy()
