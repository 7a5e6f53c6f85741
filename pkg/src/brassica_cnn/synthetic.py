"""Synthetic ten-class texture dataset used as a stand-in for the seed images.

Each class pairs a texture (stripes, checks, rings, ...) with its own two-colour
palette.  Per-image phase, frequency and colour jitter plus Gaussian pixel
noise keep the samples from being identical.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import RawImage, encode_ppm

PATTERNS = (
    "hstripes",
    "vstripes",
    "diagonal",
    "checker",
    "rings",
    "dots",
    "antidiagonal",
    "blobs",
    "crosshatch",
    "speckle",
)

PALETTES = np.array([
    [(200, 40, 40), (250, 200, 180)],
    [(40, 150, 40), (220, 250, 200)],
    [(40, 60, 200), (190, 210, 250)],
    [(210, 180, 30), (60, 40, 10)],
    [(150, 40, 160), (250, 220, 250)],
    [(30, 160, 170), (10, 40, 50)],
    [(230, 120, 20), (40, 20, 60)],
    [(120, 120, 120), (240, 240, 240)],
    [(100, 60, 20), (230, 190, 140)],
    [(20, 20, 20), (200, 230, 60)],
], dtype=np.float64)


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = size / 8 * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * np.pi)
    w = 2 * np.pi / period
    if kind == "hstripes":
        t = np.sin(w * yy + phase)
    elif kind == "vstripes":
        t = np.sin(w * xx + phase)
    elif kind == "diagonal":
        t = np.sin(w * (xx + yy) / np.sqrt(2) + phase)
    elif kind == "antidiagonal":
        t = np.sin(w * (xx - yy) / np.sqrt(2) + phase)
    elif kind == "checker":
        t = np.sign(np.sin(w * xx + phase)) * np.sign(np.sin(w * yy + phase))
    elif kind == "rings":
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        t = np.sin(w * np.hypot(yy - cy, xx - cx) + phase)
    elif kind == "dots":
        t = (np.sin(w * xx + phase) * np.sin(w * yy + phase) > 0.6) * 2.0 - 1.0
    elif kind == "blobs":
        t = np.sin(w / 3 * xx + phase) * np.cos(w / 3 * yy + phase)
    elif kind == "crosshatch":
        t = np.maximum(np.sin(w * xx + phase), np.sin(w * yy + phase))
    else:  # speckle
        t = rng.uniform(-1, 1, size=(size, size))
    return (t + 1) / 2


def make_synthetic(n_per_class: int = 60, size: int = 128, seed: int = 0, noise: float = 20.0):
    """Return ``(images, labels)`` with images as ``(n, size, size, 3)`` uint8."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cid, kind in enumerate(PATTERNS):
        for _ in range(n_per_class):
            t = _texture(kind, size, rng)[..., None]
            lo, hi = PALETTES[cid] + rng.normal(0, 10, size=(2, 3))
            img = lo * (1 - t) + hi * t + rng.normal(0, noise, size=(size, size, 3))
            images.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
            labels.append(cid)
    return np.stack(images), np.array(labels, dtype=np.int64)


def write_synthetic(root, n_per_class: int = 60, size: int = 128, seed: int = 0) -> list[str]:
    """Write the dataset as ``root/<class>/<nnnn>.ppm``; returns the class names."""
    root = Path(root)
    images, labels = make_synthetic(n_per_class, size, seed)
    names = [f"{i:02d}_{kind}" for i, kind in enumerate(PATTERNS)]
    counters = [0] * len(names)
    for img, cid in zip(images, labels):
        d = root / names[cid]
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{counters[cid]:04d}.ppm").write_bytes(encode_ppm(RawImage(img)))
        counters[cid] += 1
    return names
