"""Deterministic rasterizer: cluster grids -> flat-colored glyph PNGs.

Stands in for a learned image generator. Each cell's cluster id is decoded
to a content class by nearest prototype and drawn as a flat glyph; the PNG
bytes are a pure function of the inputs.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .scenes import COLORS, SHAPES, class_shape_color, classify_features

_COLOR_RGB = {
    "red": (204, 42, 42),
    "green": (38, 153, 77),
    "blue": (51, 85, 204),
    "yellow": (230, 200, 38),
}
_BACKGROUND_RGB = (235, 235, 235)


def _glyph_mask(shape_name: str, cell_px: int) -> np.ndarray:
    c = (cell_px - 1) / 2.0
    r = cell_px * 0.35
    yy, xx = np.mgrid[0:cell_px, 0:cell_px]
    dx = xx - c
    dy = yy - c
    if shape_name == "circle":
        return dx * dx + dy * dy <= r * r
    if shape_name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.9
    if shape_name == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape_name == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape_name}")


def render_classes(classes: np.ndarray, cell_px: int = 64) -> np.ndarray:
    """(N, N) content-class grid -> (N*px, N*px, 3) uint8 image."""
    n = classes.shape[0]
    img = np.empty((n * cell_px, n * cell_px, 3), dtype=np.uint8)
    img[:] = _BACKGROUND_RGB
    for r in range(n):
        for c in range(n):
            sc = class_shape_color(int(classes[r, c]))
            if sc is None:
                continue
            shape_i, color_i = sc
            mask = _glyph_mask(SHAPES[shape_i], cell_px)
            tile = img[r * cell_px:(r + 1) * cell_px, c * cell_px:(c + 1) * cell_px]
            tile[mask] = _COLOR_RGB[COLORS[color_i]]
    return img


def write_png(rgb: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array as a PNG byte string."""
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))

    def chunk(tag, payload):
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 9))
            + chunk(b"IEND", b""))


def render_png(ids: np.ndarray, codebook, cell_px: int = 64) -> bytes:
    """Rasterize an (N, N) cluster-id grid through a codebook to PNG bytes."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= codebook.k:
        raise ValueError("cluster id out of range for codebook")
    cell_classes = classify_features(codebook.centroids[ids], codebook.dim)
    return write_png(render_classes(cell_classes, cell_px))
