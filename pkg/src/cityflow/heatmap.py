"""Green-to-red PPM heatmaps of flow tensors.

A value ``v`` of the selected channel maps to ``f = (v - min) / (max - min)``
(``f = 0`` when the channel is constant) and then to the pixel
``(r, 255 - r, 0)`` with ``r = floor(255 * f + 0.5)``.  Row 0 of the tensor is
the first (top) image row.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

CHANNELS = {"in": 0, "inflow": 0, "out": 1, "outflow": 1}


def ramp(values) -> np.ndarray:
    """(H, W) values -> (H, W, 3) uint8 pixels."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("heatmap values must be finite")
    lo, hi = v.min(), v.max()
    f = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    r = np.floor(255.0 * f + 0.5).astype(np.uint8)
    return np.stack([r, 255 - r, np.zeros_like(r)], axis=-1)


def render(values) -> bytes:
    pixels = ramp(values)
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_ppm(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def heatmap_export(tensor, channel: str, path) -> None:
    """Write one channel of a (2, I, J) flow tensor as an I x J PPM."""
    if channel not in CHANNELS:
        raise ValueError(f"channel must be one of {sorted(CHANNELS)}")
    tensor = np.asarray(tensor)
    if tensor.ndim != 3 or tensor.shape[0] != 2:
        raise ValueError(f"expected a (2, I, J) tensor, got shape {tensor.shape}")
    write_ppm(path, render(tensor[CHANNELS[channel]]))


def read_ppm(data: bytes) -> np.ndarray:
    """Parse a binary P6 image with maxval 255 into (H, W, 3) uint8."""
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise ValueError("not a P6 image with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    pix = data[m.end():]
    if len(pix) != w * h * 3:
        raise ValueError("pixel data length does not match the header")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3)
