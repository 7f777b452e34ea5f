"""Slice-recurrent encoding and decoding, and the VVMC bitstream container.

Container layout (all integers little-endian)::

    magic          4s   b"VVMC"
    version        u8
    width          u32
    height         u32
    depth          u32
    bit_depth      u8
    gop_stride     u32
    model_id       16s
    num_slices     u8   channel groups K
    latent_ch      u16  M
    payload_bytes  u64  total size of everything after the header
    then, per slice in order:
        z_len u32, z_bytes, y_len u32, y_bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .entropy.cdf import CdfTable, build_cdfs, table_bits
from .entropy.context import ContextModel
from .entropy.models import gaussian_likelihood, round_half_away
from .entropy.rangecoder import RAW_OFFSET, RangeDecoder, RangeEncoder
from .errors import CompatibilityError, DecodeError, FormatError, TruncatedError, VvmicError
from .model import VVAE, model_id
from .volume_io import NormalizedSlice, Volume, denormalize, iter_groups, normalize, pad_to_multiple

MAGIC = b"VVMC"
VERSION = 1
_HEADER = struct.Struct("<4sBIIIBI16sBHQ")
HEADER_SIZE = _HEADER.size
PAD_MULTIPLE = 16

PathLike = Union[str, Path]


@dataclass
class SliceChunk:
    z_bytes: bytes
    y_bytes: bytes

    @property
    def lengths(self) -> Tuple[int, int]:
        return len(self.z_bytes), len(self.y_bytes)

    @property
    def size(self) -> int:
        return len(self.z_bytes) + len(self.y_bytes)


@dataclass
class BitstreamContainer:
    width: int
    height: int
    depth: int
    bit_depth: int
    gop_stride: int
    model_id: bytes
    num_slices: int
    latent_channels: int
    # None marks a chunk that was dropped (only whole groups can be decoded then).
    chunks: List[Optional[SliceChunk]] = field(default_factory=list)
    version: int = VERSION

    @property
    def payload_bytes(self) -> int:
        return sum(8 + c.size for c in self.chunks if c is not None)

    @property
    def num_groups(self) -> int:
        return -(-self.depth // self.gop_stride)

    def bpp(self) -> float:
        return sum(c.size for c in self.chunks if c is not None) * 8 / (self.width * self.height * self.depth)

    def group_range(self, g: int) -> range:
        return list(iter_groups(self.depth, self.gop_stride))[g]

    def without_group(self, g: int) -> "BitstreamContainer":
        chunks = list(self.chunks)
        for i in self.group_range(g):
            chunks[i] = None
        return BitstreamContainer(
            self.width, self.height, self.depth, self.bit_depth, self.gop_stride,
            self.model_id, self.num_slices, self.latent_channels, chunks, self.version,
        )


@dataclass
class SliceStats:
    index: int
    z_bits: int
    y_bits: int
    y_est_bits: float
    z_est_bits: float
    num_pixels: int

    @property
    def bits(self) -> int:
        return self.z_bits + self.y_bits

    @property
    def bpp(self) -> float:
        return self.bits / self.num_pixels

    @property
    def est_bpp(self) -> float:
        return (self.y_est_bits + self.z_est_bits) / self.num_pixels

    def as_dict(self) -> dict:
        return {
            "slice": self.index,
            "z_bytes": self.z_bits // 8,
            "y_bytes": self.y_bits // 8,
            "bpp": self.bpp,
            "est_bpp": self.est_bpp,
        }


def _symbol_range(s: torch.Tensor) -> torch.Tensor:
    return s.clamp(-RAW_OFFSET, RAW_OFFSET - 1)


@torch.no_grad()
def encode_latent(ctx: ContextModel, y: torch.Tensor, psi: torch.Tensor, lf: Optional[torch.Tensor]):
    """Range-code one latent (batch of 1) in canonical order.

    Returns ``(bytes, y_hat, estimated_bits)``.
    """
    y_hat = torch.zeros_like(y)
    enc = RangeEncoder()
    est = 0.0
    h, w = y.shape[2:]
    for k, (lo, hi) in enumerate(ctx.plan.boundaries):
        for p in range(ctx.num_passes):
            mask = ctx.pass_mask(p, h, w)
            mu, sigma = ctx.group_params(k, p, y_hat, psi, lf)
            s = _symbol_range(round_half_away(y[:, lo:hi] - mu))
            y_hat[:, lo:hi] = torch.where(mask, s + mu, y_hat[:, lo:hi])
            syms = s[0][:, mask].to(torch.int64).flatten().tolist()
            sig = sigma[0][:, mask].flatten().double().numpy()
            for sym, t in zip(syms, build_cdfs(sig)):
                enc.encode(sym, t)
            est += float(-torch.log2(gaussian_likelihood(s[0][:, mask], sigma[0][:, mask])).sum())
    return enc.finish(), y_hat, est


@torch.no_grad()
def decode_latent(ctx: ContextModel, data: bytes, psi: torch.Tensor, lf: Optional[torch.Tensor]) -> torch.Tensor:
    """Inverse of :func:`encode_latent`; the latent size is taken from ``psi``."""
    h, w = psi.shape[2:]
    g = ctx.plan.size
    y_hat = torch.zeros(1, ctx.cfg.latent_channels, h, w, dtype=psi.dtype)
    dec = RangeDecoder(data)
    for k, (lo, hi) in enumerate(ctx.plan.boundaries):
        for p in range(ctx.num_passes):
            mask = ctx.pass_mask(p, h, w)
            mu, sigma = ctx.group_params(k, p, y_hat, psi, lf)
            sig = sigma[0][:, mask].flatten().double().numpy()
            syms = [dec.decode(t) for t in build_cdfs(sig)]
            s = torch.zeros(1, g, h, w, dtype=psi.dtype)
            s[0][:, mask] = torch.tensor(syms, dtype=psi.dtype).reshape(g, -1)
            y_hat[:, lo:hi] = torch.where(mask, s + mu, y_hat[:, lo:hi])
    dec.check_end()
    return y_hat


class CodecSession:
    """Encoder or decoder state for one volume: model plus inter-slice buffer."""

    def __init__(self, model: VVAE, height: int, width: int, gop_stride: int = 16):
        if gop_stride < 1:
            raise ValueError("gop_stride must be >= 1")
        self.model = model.eval()
        self.crop = (height, width)
        self.padded = (height + (-height % PAD_MULTIPLE), width + (-width % PAD_MULTIPLE))
        self.gop_stride = gop_stride
        self.index = 0
        self.buffer = model.initial_buffer(1, *self.padded)
        self.reconstruct_calls = 0
        self._z_tables: Optional[List[CdfTable]] = None

    def reset(self):
        self.buffer = self.model.initial_buffer(1, *self.padded)

    def seek(self, index: int):
        """Position at the start of the group containing ``index``."""
        if index % self.gop_stride:
            raise ValueError("can only seek to a group boundary")
        self.index = index
        self.reset()

    def _begin_slice(self):
        if self.index % self.gop_stride == 0:
            self.reset()

    def z_tables(self) -> List[CdfTable]:
        if self._z_tables is None:
            self._z_tables = self.model.prior.tables()
        return self._z_tables

    def prepare(self, x_t) -> torch.Tensor:
        """Pad a normalized slice (array or NormalizedSlice) to a model input."""
        values = x_t.values if isinstance(x_t, NormalizedSlice) else np.asarray(x_t)
        padded, _ = pad_to_multiple(NormalizedSlice(values), PAD_MULTIPLE)
        return torch.from_numpy(np.ascontiguousarray(padded.values)).to(self.model.dtype)[None, None]

    @torch.no_grad()
    def encode_slice(self, x_t) -> Tuple[SliceChunk, SliceStats]:
        x = x_t if isinstance(x_t, torch.Tensor) else self.prepare(x_t)
        if tuple(x.shape[2:]) != self.padded:
            raise FormatError(f"slice size {tuple(x.shape[2:])} != padded size {self.padded}")
        self._begin_slice()
        m = self.model
        e1, e2, e3, lf = m.inter_slice_analysis(self.buffer)
        y = m.g_a(x, e1, e2, e3)

        z_sym = _symbol_range(round_half_away(m.h_a(y)))
        zc = z_sym.shape[1]
        z_flat = z_sym[0].reshape(zc, -1)
        z_tabs = self.z_tables()
        z_list = z_flat.to(torch.int64).flatten().tolist()
        z_tables = [z_tabs[c] for c in range(zc) for _ in range(z_flat.shape[1])]
        enc = RangeEncoder()
        for s, t in zip(z_list, z_tables):
            enc.encode(s, t)
        z_bytes = enc.finish()
        z_lik = m.prior.likelihood(z_sym)
        z_est = float(-torch.log2(z_lik).sum())

        psi = m.h_s(z_sym, y.shape[2:])
        y_bytes, y_hat, y_est = encode_latent(m.context, y, psi, lf)

        m_x, f_t = m.decode_features(y_hat, lf)
        self.buffer = f_t
        self.last_y_hat = y_hat
        self.last_m_x = m_x
        stats = SliceStats(
            self.index, 8 * len(z_bytes), 8 * len(y_bytes), y_est, z_est, self.crop[0] * self.crop[1]
        )
        self.index += 1
        return SliceChunk(z_bytes, y_bytes), stats

    @torch.no_grad()
    def decode_slice(self, chunk: SliceChunk, pixels: bool = True):
        """Returns ``(x_hat, M_x, F_t)``; ``x_hat`` is None when ``pixels`` is False.

        ``x_hat`` and ``M_x`` are cropped to the original slice size.
        """
        self._begin_slice()
        m = self.model
        _, _, _, lf = m.inter_slice_analysis(self.buffer)
        hp, wp = self.padded
        h, w = hp // 16, wp // 16
        hz, wz = -(-h // 4), -(-w // 4)
        zc = m.cfg.hyper_channels
        z_tabs = self.z_tables()
        dec = RangeDecoder(chunk.z_bytes)
        z_vals = [dec.decode(z_tabs[c]) for c in range(zc) for _ in range(hz * wz)]
        dec.check_end()
        z_sym = torch.tensor(z_vals, dtype=m.dtype).reshape(1, zc, hz, wz)
        psi = m.h_s(z_sym, (h, w))

        y_hat = decode_latent(m.context, chunk.y_bytes, psi, lf)

        m_x, f_t = m.decode_features(y_hat, lf)
        if not bool(torch.isfinite(f_t).all()):
            raise DecodeError(f"slice {self.index}: non-finite decoder state (corrupt chunk?)")
        self.buffer = f_t
        self.last_y_hat = y_hat
        x_hat = None
        if pixels:
            self.reconstruct_calls += 1
            x_hat = m.reconstruct(f_t)[0, 0, : self.crop[0], : self.crop[1]]
            if not bool(torch.isfinite(x_hat).all()):
                raise DecodeError(f"slice {self.index}: non-finite reconstruction (corrupt chunk?)")
        self.index += 1
        return x_hat, m_x[0, :, : self.crop[0], : self.crop[1]], f_t


def _with_slice(exc: Exception, index: int) -> Exception:
    msg = f"slice {index}: {exc}"
    try:
        new = type(exc)(msg)
    except Exception:
        new = VvmicError(msg)
    return new


def encode_volume(v: Volume, model: VVAE, gop_stride: int = 16, return_stats: bool = False):
    """Encode every slice in order; the buffer restarts at each group boundary."""
    session = CodecSession(model, v.height, v.width, gop_stride)
    chunks, stats = [], []
    for i, s in enumerate(normalize(v)):
        try:
            chunk, st = session.encode_slice(s)
        except VvmicError as exc:
            raise _with_slice(exc, i) from exc
        chunks.append(chunk)
        stats.append(st)
    container = BitstreamContainer(
        v.width, v.height, v.depth, v.bit_depth, gop_stride, model_id(model),
        model.cfg.num_slices, model.cfg.latent_channels, chunks,
    )
    return (container, stats) if return_stats else container


def check_compatible(container: BitstreamContainer, model: VVAE):
    if container.model_id != model_id(model):
        raise CompatibilityError("checkpoint does not match the bitstream's model id")
    if (container.num_slices, container.latent_channels) != (model.cfg.num_slices, model.cfg.latent_channels):
        raise CompatibilityError("bitstream channel layout does not match the checkpoint")


@dataclass
class DecodedVolume:
    volume: Optional[Volume]
    features: Optional[List[np.ndarray]]
    slice_indices: List[int]
    reconstruct_calls: int = 0


def decode_volume(
    container: BitstreamContainer,
    model: VVAE,
    emit_features: bool = False,
    pixels: bool = True,
    groups: Optional[Iterable[int]] = None,
) -> DecodedVolume:
    """Decode pixels and/or per-slice M_x features.

    With ``pixels=False`` the reconstruction head is never run. ``groups``
    restricts decoding to the listed GOP indices; dropped chunks are only
    allowed outside those groups. The returned volume then holds only the
    decoded slices.
    """
    check_compatible(container, model)
    if len(container.chunks) != container.depth:
        raise FormatError(f"container has {len(container.chunks)} chunks for depth {container.depth}")
    session = CodecSession(model, container.height, container.width, container.gop_stride)
    wanted = sorted(set(groups)) if groups is not None else range(container.num_groups)
    slices, feats, indices = [], [], []
    for g in wanted:
        rng = container.group_range(g)
        session.seek(rng.start)
        for i in rng:
            chunk = container.chunks[i]
            if chunk is None:
                raise FormatError(f"slice {i}: chunk missing")
            try:
                x_hat, m_x, _ = session.decode_slice(chunk, pixels=pixels)
            except VvmicError as exc:
                raise _with_slice(exc, i) from exc
            indices.append(i)
            if pixels:
                slices.append(denormalize(x_hat.double().numpy(), container.bit_depth))
            if emit_features:
                feats.append(m_x.float().numpy().copy())
    volume = Volume.from_array(np.stack(slices), container.bit_depth) if pixels and slices else None
    return DecodedVolume(volume, feats if emit_features else None, indices, session.reconstruct_calls)


def container_bytes(c: BitstreamContainer) -> bytes:
    if any(ch is None for ch in c.chunks):
        raise FormatError("cannot serialize a container with dropped chunks")
    if len(c.chunks) != c.depth:
        raise FormatError("chunk count must equal depth")
    out = bytearray(
        _HEADER.pack(
            MAGIC, c.version, c.width, c.height, c.depth, c.bit_depth, c.gop_stride,
            c.model_id, c.num_slices, c.latent_channels, c.payload_bytes,
        )
    )
    for ch in c.chunks:
        out += struct.pack("<I", len(ch.z_bytes)) + ch.z_bytes
        out += struct.pack("<I", len(ch.y_bytes)) + ch.y_bytes
    return bytes(out)


def write_container(c: BitstreamContainer, path: PathLike) -> None:
    Path(path).write_bytes(container_bytes(c))


@dataclass
class ContainerHeader:
    version: int
    width: int
    height: int
    depth: int
    bit_depth: int
    gop_stride: int
    model_id: bytes
    num_slices: int
    latent_channels: int
    payload_bytes: int

    @property
    def bpp(self) -> float:
        # Length prefixes are framing, not coded data.
        return (self.payload_bytes - 8 * self.depth) * 8 / (self.width * self.height * self.depth)


def parse_header(data: bytes) -> ContainerHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not a VVMC container")
    if len(data) < HEADER_SIZE:
        raise TruncatedError("truncated container header")
    fields = _HEADER.unpack_from(data)
    hdr = ContainerHeader(*fields[1:])
    if hdr.version != VERSION:
        raise FormatError(f"unsupported container version {hdr.version}")
    if min(hdr.width, hdr.height, hdr.depth, hdr.gop_stride) < 1 or hdr.bit_depth not in (8, 16):
        raise FormatError("invalid container header fields")
    return hdr


def read_header(path: PathLike) -> ContainerHeader:
    with open(path, "rb") as f:
        return parse_header(f.read(HEADER_SIZE))


def parse_container(data: bytes) -> BitstreamContainer:
    hdr = parse_header(data)
    if len(data) - HEADER_SIZE < hdr.payload_bytes:
        raise TruncatedError("container payload is truncated")
    if len(data) - HEADER_SIZE > hdr.payload_bytes:
        raise FormatError("trailing bytes after container payload")
    pos = HEADER_SIZE
    chunks = []
    for i in range(hdr.depth):
        parts = []
        for _ in range(2):
            if pos + 4 > len(data):
                raise TruncatedError(f"slice {i}: truncated chunk length")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise TruncatedError(f"slice {i}: truncated chunk payload")
            parts.append(bytes(data[pos : pos + n]))
            pos += n
        chunks.append(SliceChunk(*parts))
    if pos != len(data):
        raise FormatError("chunk lengths disagree with payload size")
    return BitstreamContainer(
        hdr.width, hdr.height, hdr.depth, hdr.bit_depth, hdr.gop_stride, hdr.model_id,
        hdr.num_slices, hdr.latent_channels, chunks, hdr.version,
    )


def read_container(path: PathLike) -> BitstreamContainer:
    return parse_container(Path(path).read_bytes())
