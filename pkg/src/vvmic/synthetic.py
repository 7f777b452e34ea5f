"""Synthetic phantom volumes with known labels, for smoke runs and tests."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .volume_io import Volume

# class id -> mean intensity in [0, 1]
CLASS_INTENSITY = {0: 0.15, 1: 0.75, 2: 0.45}


def shapes_phantom(
    depth: int = 16, height: int = 64, width: int = 64, seed: int = 0, noise: float = 0.02, bit_depth: int = 8
) -> Tuple[Volume, np.ndarray]:
    """Ellipsoid (class 1) and box (class 2) on a smooth background.

    Shapes move and change size slowly across slices, so neighbouring
    slices are similar but not identical. Returns ``(volume, labels)`` with
    labels of shape (depth, height, width).
    """
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(
        np.arange(depth, dtype=np.float64),
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    labels = np.zeros((depth, height, width), dtype=np.uint8)

    cz, cy, cx = rng.uniform(0.3, 0.7) * depth, rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
    rz = rng.uniform(0.5, 0.9) * depth
    ry, rx = rng.uniform(0.15, 0.28) * height, rng.uniform(0.15, 0.28) * width
    drift = rng.uniform(-0.4, 0.4, size=2)
    ell = ((z - cz) / rz) ** 2 + ((y - cy - drift[0] * (z - cz)) / ry) ** 2 + ((x - cx - drift[1] * (z - cz)) / rx) ** 2 <= 1
    labels[ell] = 1

    # Redraw the box until most of it lies outside the ellipsoid; it may
    # grow or shrink by at most a quarter of its height over the volume.
    z0 = rng.integers(0, max(1, depth // 4))
    for _ in range(20):
        by, bx = rng.uniform(0.05, 0.6) * height, rng.uniform(0.05, 0.6) * width
        hy, hx = rng.uniform(0.15, 0.25) * height, rng.uniform(0.15, 0.25) * width
        grow = rng.uniform(-0.125, 0.125) * hy / max(depth, 1)
        box = (y >= by - grow * z) & (y < by + hy + grow * z) & (x >= bx) & (x < bx + hx) & (z >= z0)
        if (box & ~ell).sum() >= 0.8 * box.sum():
            break
    labels[box & ~ell] = 2

    intensity = np.vectorize(CLASS_INTENSITY.get)(labels).astype(np.float64)
    fy, fx = rng.uniform(1, 3, size=2)
    background = 0.08 * np.sin(2 * np.pi * fy * y / height + 0.2 * z) * np.cos(2 * np.pi * fx * x / width)
    img = intensity + background + noise * rng.standard_normal(labels.shape)
    top = 2**bit_depth - 1
    samples = np.clip(np.round(img * top), 0, top)
    return Volume.from_array(samples, bit_depth), labels


def repeated_slice_volume(v: Volume, index: int = 0, depth: int = 16) -> Volume:
    """A volume made of ``depth`` copies of slice ``index`` of ``v``."""
    return Volume.from_array(np.repeat(v.samples[index : index + 1], depth, axis=0), v.bit_depth)
