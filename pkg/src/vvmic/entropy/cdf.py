"""Quantized cumulative frequency tables for the range coder.

Every table has 16-bit precision (frequencies sum to ``2**16``), covers a
contiguous alphabet of integer symbols and ends with one escape entry that
absorbs the remaining probability mass. Quantization of a pmf is
deterministic: each entry gets one reserved count plus
``floor(p * (2**16 - n_entries))``, and the leftover counts go to the most
probable entry (lowest index on ties).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
TAIL = 64
SIGMA_MIN = 1e-4


@dataclass(frozen=True)
class CdfTable:
    """``cdf[i]`` is the cumulative count before entry ``i``; ``cdf[-1] == total``.

    Entry ``i < escape`` stands for symbol ``i + offset``.
    """

    cdf: Tuple[int, ...]
    offset: int

    @property
    def total(self) -> int:
        return self.cdf[-1]

    @property
    def escape(self) -> int:
        return len(self.cdf) - 2

    def freq(self, idx: int) -> int:
        return self.cdf[idx + 1] - self.cdf[idx]

    def to_bytes(self) -> bytes:
        return np.asarray(self.cdf, dtype="<u4").tobytes() + int(self.offset).to_bytes(4, "little", signed=True)


def quantize_pmf(pmf: np.ndarray, tail_mass: np.ndarray) -> np.ndarray:
    """Quantize rows of ``pmf`` (plus an escape column) to integer frequencies.

    ``pmf`` has shape (rows, n); ``tail_mass`` has shape (rows,). Returns an
    int64 array of shape (rows, n + 1) whose rows sum to ``2**16``.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    probs = np.concatenate([pmf, np.asarray(tail_mass, dtype=np.float64).reshape(-1, 1)], axis=1)
    probs = np.clip(probs, 0.0, 1.0)
    n = probs.shape[1]
    spare = TOTAL - n
    freq = 1 + np.floor(probs * spare).astype(np.int64)
    deficit = TOTAL - freq.sum(axis=1)
    # floor() can overshoot only if the row mass exceeds one.
    if np.any(deficit < 0):
        raise ValueError("pmf rows must sum to at most one")
    top = np.argmax(probs, axis=1)
    freq[np.arange(len(freq)), top] += deficit
    return freq


def gaussian_pmf(sigma: np.ndarray, tail: int = TAIL) -> Tuple[np.ndarray, np.ndarray]:
    """Discretized zero-mean Gaussian over [-tail, tail] and its outside mass."""
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), SIGMA_MIN)
    # Evaluate the non-positive half and mirror it so the table is exactly symmetric.
    s = np.arange(-tail, 1, dtype=np.float64)
    half = ndtr((s + 0.5) / sigma) - ndtr((s - 0.5) / sigma)
    pmf = np.concatenate([half, half[:, -2::-1]], axis=1)
    tail_mass = 2.0 * ndtr((-tail - 0.5) / sigma[:, 0])
    return pmf, tail_mass


def _freq_to_tables(freq: np.ndarray, offset: int) -> List[CdfTable]:
    cdf = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return [CdfTable(tuple(row), offset) for row in cdf.tolist()]


def build_cdfs(sigmas: Sequence[float], tail: int = TAIL) -> List[CdfTable]:
    """One table per scale; identical scales give identical tables."""
    sig = np.asarray(sigmas, dtype=np.float64).ravel()
    if sig.size == 0:
        return []
    uniq, inverse = np.unique(sig, return_inverse=True)
    pmf, tail_mass = gaussian_pmf(uniq, tail)
    tables = _freq_to_tables(quantize_pmf(pmf, tail_mass), -tail)
    return [tables[i] for i in inverse]


def build_cdf(sigma: float, tail: int = TAIL) -> CdfTable:
    return build_cdfs([sigma], tail)[0]


def tables_from_pmf(pmf: np.ndarray, tail_mass: np.ndarray, offset: int) -> List[CdfTable]:
    return _freq_to_tables(quantize_pmf(pmf, tail_mass), offset)


def table_bits(symbols: Sequence[int], tables: Sequence[CdfTable]) -> float:
    """Ideal code length in bits of ``symbols`` under the quantized tables.

    Escaped symbols add 16 raw bits.
    """
    bits = 0.0
    for s, t in zip(symbols, tables):
        idx = int(s) - t.offset
        if 0 <= idx < t.escape:
            bits += PRECISION - np.log2(t.freq(idx))
        else:
            bits += PRECISION - np.log2(t.freq(t.escape)) + 16
    return bits
