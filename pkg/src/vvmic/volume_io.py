"""VVOL volume files, intensity normalization, padding and slice grouping.

A VVOL file is an 18-byte little-endian header followed by raw samples::

    magic     4s   b"VVOL"
    version   u8   1
    bit_depth u8   8 or 16
    width     u32
    height    u32
    depth     u32
    samples   width*height*depth values, u8 or u16 LE, slice-major then row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, TruncatedError

MAGIC = b"VVOL"
VERSION = 1
_HEADER = struct.Struct("<4sBBIII")
HEADER_SIZE = _HEADER.size

PathLike = Union[str, Path]


def _dtype_for(bit_depth: int) -> np.dtype:
    if bit_depth == 8:
        return np.dtype("u1")
    if bit_depth == 16:
        return np.dtype("<u2")
    raise FormatError(f"unsupported bit depth {bit_depth} (expected 8 or 16)")


@dataclass
class Volume:
    """Grayscale volume; ``samples`` has shape (depth, height, width)."""

    width: int
    height: int
    depth: int
    bit_depth: int
    samples: np.ndarray

    def __post_init__(self):
        dtype = _dtype_for(self.bit_depth)
        if min(self.width, self.height, self.depth) < 1:
            raise FormatError("width, height and depth must be >= 1")
        samples = np.asarray(self.samples)
        if samples.size != self.width * self.height * self.depth:
            raise FormatError(
                f"expected {self.width * self.height * self.depth} samples, got {samples.size}"
            )
        if samples.size and (samples.min() < 0 or samples.max() >= 2**self.bit_depth):
            raise FormatError(f"sample values must lie in [0, {2**self.bit_depth - 1}]")
        self.samples = samples.reshape(self.depth, self.height, self.width).astype(dtype)

    @classmethod
    def from_array(cls, array: np.ndarray, bit_depth: int = 8) -> "Volume":
        array = np.asarray(array)
        if array.ndim == 2:
            array = array[None]
        if array.ndim != 3:
            raise FormatError("expected an array of shape (depth, height, width)")
        d, h, w = array.shape
        return cls(width=w, height=h, depth=d, bit_depth=bit_depth, samples=array)

    @property
    def max_value(self) -> int:
        return 2**self.bit_depth - 1

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            (self.width, self.height, self.depth, self.bit_depth)
            == (other.width, other.height, other.depth, other.bit_depth)
            and np.array_equal(self.samples, other.samples)
        )


@dataclass
class NormalizedSlice:
    """One slice with values in [0, 1], shape (height, width)."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SliceGroup:
    slices: List[NormalizedSlice]
    group_index: int
    start: int = 0
    crop_record: Tuple[int, int] = field(default=(0, 0))

    def __len__(self):
        return len(self.slices)


def load_vvol(path: PathLike) -> Volume:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a VVOL file")
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"{path}: truncated header")
    _, version, bit_depth, width, height, depth = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported VVOL version {version}")
    dtype = _dtype_for(bit_depth)
    count = width * height * depth
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(data) < expected:
        raise TruncatedError(f"{path}: payload has {len(data) - HEADER_SIZE} bytes, expected {expected - HEADER_SIZE}")
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} trailing bytes after payload")
    samples = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER_SIZE)
    return Volume(width, height, depth, bit_depth, samples.copy())


def vvol_bytes(v: Volume) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, v.bit_depth, v.width, v.height, v.depth)
    return header + np.ascontiguousarray(v.samples, dtype=_dtype_for(v.bit_depth)).tobytes()


def save_vvol(v: Volume, path: PathLike) -> None:
    Path(path).write_bytes(vvol_bytes(v))


def normalize(v: Volume) -> List[NormalizedSlice]:
    scale = float(v.max_value)
    return [NormalizedSlice(v.samples[i].astype(np.float64) / scale) for i in range(v.depth)]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def denormalize(s: Union[NormalizedSlice, np.ndarray], bit_depth: int) -> np.ndarray:
    values = s.values if isinstance(s, NormalizedSlice) else np.asarray(s)
    if not np.all(np.isfinite(values)):
        raise FormatError("cannot denormalize non-finite values")
    top = 2**bit_depth - 1
    out = np.clip(round_half_away(values.astype(np.float64) * top), 0, top)
    return out.astype(_dtype_for(bit_depth))


def pad_to_multiple(s: NormalizedSlice, m: int = 16) -> Tuple[NormalizedSlice, Tuple[int, int]]:
    """Edge-replicate ``s`` up to the next multiple of ``m`` in both dimensions."""
    if m < 1:
        raise ValueError("padding multiple must be >= 1")
    h, w = s.values.shape
    ph = -h % m
    pw = -w % m
    values = np.pad(s.values, ((0, ph), (0, pw)), mode="edge") if ph or pw else s.values
    return NormalizedSlice(values), (h, w)


def crop(s: NormalizedSlice, crop_record: Tuple[int, int]) -> NormalizedSlice:
    h, w = crop_record
    return NormalizedSlice(s.values[:h, :w])


def padded_size(size: int, m: int = 16) -> int:
    return size + (-size % m)


def group_slices(slices: Sequence[NormalizedSlice], gop_stride: int = 16) -> List[SliceGroup]:
    if gop_stride < 1:
        raise ValueError("gop_stride must be >= 1")
    groups = []
    for gi, start in enumerate(range(0, len(slices), gop_stride)):
        members = list(slices[start : start + gop_stride])
        groups.append(SliceGroup(members, gi, start, members[0].values.shape))
    return groups


def iter_groups(depth: int, gop_stride: int) -> Iterable[range]:
    """Slice-index ranges of each group of a ``depth``-slice volume."""
    for start in range(0, depth, gop_stride):
        yield range(start, min(start + gop_stride, depth))
