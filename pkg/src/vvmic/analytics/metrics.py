"""Pixel fidelity and segmentation overlap metrics."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

PSNR_INF = math.inf


def psnr(a, b, max_val: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10 * np.log10(max_val**2 / mse))


def dice(pred, gt, class_id: int = 1) -> float:
    """``2|A n B| / (|A| + |B|)`` for one class; 1.0 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbour.

    Voxels on the array border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def _spacing(spacing, ndim) -> np.ndarray:
    if spacing is None:
        return np.ones(ndim)
    s = np.asarray(spacing, dtype=np.float64).ravel()
    if s.size == 1:
        s = np.repeat(s, ndim)
    if s.size != ndim:
        raise ValueError(f"spacing needs {ndim} entries")
    return s


def empty_mask_sentinel(shape: Sequence[int], spacing=None) -> float:
    """Volume diagonal in spacing units, reported when exactly one mask is empty."""
    s = _spacing(spacing, len(shape))
    return float(np.sqrt(np.sum((np.asarray(shape) * s) ** 2)))


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=None):
    """Nearest boundary-to-boundary distances, ``(a -> b, b -> a)``."""
    s = _spacing(spacing, a.ndim)
    pa = np.argwhere(boundary(a)) * s
    pb = np.argwhere(boundary(b)) * s
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return d_ab, d_ba


def hd95(pred, gt, class_id: int = 1, spacing=None, sentinel: Optional[float] = None) -> float:
    """95th percentile of the pooled symmetric boundary distances.

    Both masks empty gives 0; exactly one empty gives ``sentinel`` (default:
    the volume diagonal in spacing units).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return empty_mask_sentinel(a.shape, spacing) if sentinel is None else sentinel
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
