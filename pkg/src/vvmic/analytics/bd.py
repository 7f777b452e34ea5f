"""Bjontegaard delta rate and quality between two rate-distortion curves."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.interpolate import PchipInterpolator


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr: float


class RdCurve:
    """At least four points with strictly increasing bpp and finite quality."""

    def __init__(self, points: Iterable):
        pts = [p if isinstance(p, RdPoint) else RdPoint(float(p[0]), float(p[1])) for p in points]
        pts.sort(key=lambda p: p.bpp)
        if len(pts) < 4:
            raise ValueError("an RD curve needs at least 4 points")
        rates = [p.bpp for p in pts]
        if any(r <= 0 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("bpp values must be positive and strictly increasing")
        if not all(math.isfinite(p.psnr) for p in pts):
            raise ValueError("quality values must be finite")
        self.points: List[RdPoint] = pts

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def quality(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])

    def __len__(self):
        return len(self.points)


def _integral(x, y, lo, hi, method):
    order = np.argsort(x)
    x, y = x[order], y[order]
    if method == "cubic":
        p = np.polyint(np.polyfit(x, y, 3))
        return np.polyval(p, hi) - np.polyval(p, lo)
    if method == "pchip":
        return float(PchipInterpolator(x, y).integrate(lo, hi))
    raise ValueError(f"unknown interpolation {method!r}")


def _overlap(a, b):
    lo = max(a.min(), b.min())
    hi = min(a.max(), b.max())
    if hi <= lo:
        raise ValueError("curves do not overlap")
    return lo, hi


def bd_rate(anchor: RdCurve, test: RdCurve, method: str = "cubic") -> float:
    """Average rate difference of ``test`` against ``anchor`` at equal quality, in percent.

    Negative means ``test`` needs fewer bits.
    """
    la, lt = np.log10(anchor.rates), np.log10(test.rates)
    qa, qt = anchor.quality, test.quality
    lo, hi = _overlap(qa, qt)
    diff = (_integral(qt, lt, lo, hi, method) - _integral(qa, la, lo, hi, method)) / (hi - lo)
    return float((10**diff - 1) * 100)


def bd_psnr(anchor: RdCurve, test: RdCurve, method: str = "cubic") -> float:
    """Average quality difference of ``test`` against ``anchor`` at equal rate, in dB."""
    la, lt = np.log10(anchor.rates), np.log10(test.rates)
    lo, hi = _overlap(la, lt)
    return float((_integral(lt, test.quality, lo, hi, method) - _integral(la, anchor.quality, lo, hi, method)) / (hi - lo))
