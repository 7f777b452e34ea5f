"""Analysis, synthesis, hyper, fusion and reconstruction networks.

Spatial scales for a padded slice of size H x W:

    buffer F_t, M_x, M_F      H      (buffer_channels)
    E1                        H/2
    E2, D2                    H/4
    E3, D1                    H/8
    y, L_F, Psi               H/16
    z                         ceil(H/64)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 192
    hyper_channels: int = 192
    transform_channels: int = 192
    buffer_channels: int = 16
    enc_context_channels: int = 32
    dec_context_channels: int = 32
    aux_latent_channels: int = 64
    recon_channels: int = 32
    num_slices: int = 4
    context_channels: int = 96
    ep_hidden: int = 256
    use_ckbd: bool = True
    use_channelwise: bool = True
    use_auxiliary: bool = True

    def __post_init__(self):
        if self.num_slices < 1 or self.latent_channels % self.num_slices:
            raise ConfigError("latent_channels must split evenly into num_slices groups")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v < 1:
                raise ConfigError(f"{f.name} must be positive")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Full widths divided by six (rounded to multiples of four)."""
        base = dict(
            latent_channels=32,
            hyper_channels=32,
            transform_channels=32,
            buffer_channels=16,
            enc_context_channels=8,
            dec_context_channels=8,
            aux_latent_channels=12,
            recon_channels=8,
            num_slices=4,
            context_channels=16,
            ep_hidden=48,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def debug(cls, **overrides) -> "ModelConfig":
        """At most eight channels everywhere, for gradient checks."""
        base = dict(
            latent_channels=8,
            hyper_channels=4,
            transform_channels=8,
            buffer_channels=4,
            enc_context_channels=4,
            dec_context_channels=4,
            aux_latent_channels=4,
            recon_channels=4,
            num_slices=2,
            context_channels=4,
            ep_hidden=8,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def group_channels(self) -> int:
        return self.latent_channels // self.num_slices

    @property
    def hyper_out_channels(self) -> int:
        return 2 * self.latent_channels


def gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """Generalized divisive normalization over the channel axis of NCHW ``x``.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; the inverse multiplies.
    """
    if bool((beta <= 0).any()):
        raise ConfigError("GDN beta must be positive")
    if bool((gamma < 0).any()):
        raise ConfigError("GDN gamma must be non-negative")
    c = x.shape[1]
    norm = F.conv2d(x * x, gamma.reshape(c, c, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


class GDN(nn.Module):
    """GDN layer with ``beta = beta_min + b^2`` and ``gamma = g^2``."""

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        self.beta_raw = nn.Parameter(torch.full((channels,), (1.0 - beta_min) ** 0.5))
        g = gamma_init * torch.eye(channels) + 1e-6
        self.gamma_raw = nn.Parameter(g.sqrt())

    @property
    def beta(self) -> torch.Tensor:
        return self.beta_min + self.beta_raw**2

    @property
    def gamma(self) -> torch.Tensor:
        return self.gamma_raw**2

    def forward(self, x):
        c = x.shape[1]
        norm = torch.sqrt(F.conv2d(x * x, self.gamma.reshape(c, c, 1, 1), self.beta))
        return x * norm if self.inverse else x / norm


def conv(cin, cout, k=5, stride=2):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def deconv(cin, cout, k=5, stride=2):
    return nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=k // 2, output_padding=stride - 1)


class SubpelConv(nn.Sequential):
    def __init__(self, cin, cout, r=2):
        super().__init__(nn.Conv2d(cin, cout * r * r, 3, padding=1), nn.PixelShuffle(r))


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


def _check(t: torch.Tensor, channels: int, h: int, w: int, name: str):
    if t.dim() != 4 or t.shape[1] != channels or t.shape[2] != h or t.shape[3] != w:
        raise ShapeError(f"{name}: expected (N, {channels}, {h}, {w}), got {tuple(t.shape)}")


def _cat(x: torch.Tensor, ctx: Optional[torch.Tensor], name: str) -> torch.Tensor:
    if ctx is None:
        return x
    if ctx.shape[0] != x.shape[0] or ctx.shape[2:] != x.shape[2:]:
        raise ShapeError(f"{name}: context {tuple(ctx.shape)} does not match activation {tuple(x.shape)}")
    return torch.cat([x, ctx], dim=1)


class InterSliceAnalysis(nn.Module):
    """Buffer F_{t-1} -> multi-scale contexts E1, E2, E3 and latent prior L_F."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ce, cl = cfg.enc_context_channels, cfg.aux_latent_channels
        self.buffer_channels = cfg.buffer_channels
        chans = [cfg.buffer_channels, ce, ce, ce, cl]
        self.steps = nn.ModuleList(
            nn.Sequential(conv(chans[i], chans[i + 1], 3), nn.GELU(), ResBlock(chans[i + 1])) for i in range(4)
        )

    def forward(self, buffer: torch.Tensor):
        if buffer.dim() != 4 or buffer.shape[1] != self.buffer_channels or buffer.shape[2] % 16 or buffer.shape[3] % 16:
            raise ShapeError(f"buffer must be (N, {self.buffer_channels}, 16a, 16b), got {tuple(buffer.shape)}")
        outs = []
        x = buffer
        for step in self.steps:
            x = step(x)
            outs.append(x)
        e1, e2, e3, lf = outs
        return e1, e2, e3, lf


class InterSliceSynthesis(nn.Module):
    """L_F -> decoder contexts D1 (H/8), D2 (H/4) and full-resolution M_F."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cd = cfg.dec_context_channels
        self.in_channels = cfg.aux_latent_channels
        self.up1 = nn.Sequential(SubpelConv(cfg.aux_latent_channels, cd), nn.GELU(), ResBlock(cd))
        self.up2 = nn.Sequential(deconv(cd, cd), nn.GELU(), ResBlock(cd))
        self.up3 = nn.Sequential(deconv(cd, cd), nn.GELU(), ResBlock(cd))
        self.up4 = SubpelConv(cd, cfg.buffer_channels)

    def forward(self, lf: torch.Tensor):
        if lf.dim() != 4 or lf.shape[1] != self.in_channels:
            raise ShapeError(f"L_F must have {self.in_channels} channels, got {tuple(lf.shape)}")
        d1 = self.up1(lf)
        d2 = self.up2(d1)
        m_f = self.up4(self.up3(d2))
        return d1, d2, m_f


class Analysis(nn.Module):
    """Current slice x (+ E1, E2, E3) -> latent y at H/16."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, ce = cfg.transform_channels, cfg.enc_context_channels
        extra = ce if cfg.use_auxiliary else 0
        self.use_auxiliary = cfg.use_auxiliary
        self.ce = ce
        self.conv1 = conv(1, c)
        self.gdn1 = GDN(c)
        self.conv2 = conv(c + extra, c)
        self.gdn2 = GDN(c)
        self.conv3 = conv(c + extra, c)
        self.gdn3 = GDN(c)
        self.conv4 = conv(c + extra, cfg.latent_channels)
        self.res = ResBlock(cfg.latent_channels)

    def forward(self, x, e1=None, e2=None, e3=None):
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"slice must be (N, 1, 16a, 16b), got {tuple(x.shape)}")
        if self.use_auxiliary and (e1 is None or e2 is None or e3 is None):
            raise ShapeError("auxiliary contexts E1, E2, E3 are required")
        if not self.use_auxiliary:
            e1 = e2 = e3 = None
        h = self.gdn1(self.conv1(x))
        h = self.gdn2(self.conv2(_cat(h, e1, "E1")))
        h = self.gdn3(self.conv3(_cat(h, e2, "E2")))
        return self.res(self.conv4(_cat(h, e3, "E3")))


class Synthesis(nn.Module):
    """Quantized latent (+ D1, D2) -> current-slice decoding feature M_x at full resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, cd = cfg.transform_channels, cfg.dec_context_channels
        extra = cd if cfg.use_auxiliary else 0
        self.use_auxiliary = cfg.use_auxiliary
        self.latent_channels = cfg.latent_channels
        self.res = ResBlock(cfg.latent_channels)
        self.deconv1 = deconv(cfg.latent_channels, c)
        self.igdn1 = GDN(c, inverse=True)
        self.deconv2 = deconv(c + extra, c)
        self.igdn2 = GDN(c, inverse=True)
        self.deconv3 = deconv(c + extra, c)
        self.igdn3 = GDN(c, inverse=True)
        self.out = SubpelConv(c, cfg.buffer_channels)

    def forward(self, y_hat, d1=None, d2=None):
        if y_hat.dim() != 4 or y_hat.shape[1] != self.latent_channels:
            raise ShapeError(f"latent must have {self.latent_channels} channels, got {tuple(y_hat.shape)}")
        if self.use_auxiliary and (d1 is None or d2 is None):
            raise ShapeError("auxiliary contexts D1, D2 are required")
        if not self.use_auxiliary:
            d1 = d2 = None
        h = self.igdn1(self.deconv1(self.res(y_hat)))
        h = self.igdn2(self.deconv2(_cat(h, d1, "D1")))
        h = self.igdn3(self.deconv3(_cat(h, d2, "D2")))
        return self.out(h)


class HyperAnalysis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        m, n = cfg.latent_channels, cfg.hyper_channels
        self.latent_channels = m
        self.net = nn.Sequential(
            nn.Conv2d(m, n, 3, padding=1),
            nn.GELU(),
            conv(n, n),
            nn.GELU(),
            conv(n, n),
        )

    def forward(self, y):
        if y.dim() != 4 or y.shape[1] != self.latent_channels:
            raise ShapeError(f"latent must have {self.latent_channels} channels, got {tuple(y.shape)}")
        return self.net(y)


class HyperSynthesis(nn.Module):
    """z_hat -> Psi with 2M channels at latent resolution (cropped to ``size``)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        m, n = cfg.latent_channels, cfg.hyper_channels
        self.hyper_channels = n
        self.net = nn.Sequential(
            deconv(n, m),
            nn.GELU(),
            deconv(m, m * 3 // 2),
            nn.GELU(),
            nn.Conv2d(m * 3 // 2, 2 * m, 3, padding=1),
        )

    def forward(self, z_hat, size: Optional[Tuple[int, int]] = None):
        if z_hat.dim() != 4 or z_hat.shape[1] != self.hyper_channels:
            raise ShapeError(f"hyper-latent must have {self.hyper_channels} channels, got {tuple(z_hat.shape)}")
        psi = self.net(z_hat)
        if size is not None:
            if psi.shape[2] < size[0] or psi.shape[3] < size[1]:
                raise ShapeError(f"hyper-latent too small for latent size {size}")
            psi = psi[:, :, : size[0], : size[1]]
        return psi


class Fusion(nn.Module):
    """Gated fusion ``F_t = sigmoid(A[M_x, M_F]) * tanh(B[M_x, M_F])``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        b = cfg.buffer_channels
        cin = 2 * b if cfg.use_auxiliary else b
        self.in_channels = cin
        self.gate = nn.Conv2d(cin, b, 3, padding=1)
        self.candidate = nn.Conv2d(cin, b, 3, padding=1)

    def forward(self, m_x, m_f=None):
        h = m_x if m_f is None else torch.cat([m_x, m_f], dim=1)
        if m_f is not None and m_f.shape != m_x.shape:
            raise ShapeError(f"M_x {tuple(m_x.shape)} and M_F {tuple(m_f.shape)} differ")
        if h.shape[1] != self.in_channels:
            raise ShapeError(f"fusion expects {self.in_channels} input channels, got {h.shape[1]}")
        return torch.sigmoid(self.gate(h)) * torch.tanh(self.candidate(h))


class ReconstructionHead(nn.Module):
    """Three 3x3 convolutions from the buffer to one pixel channel."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        b, r = cfg.buffer_channels, cfg.recon_channels
        self.in_channels = b
        self.conv1 = nn.Conv2d(b, r, 3, padding=1)
        self.conv2 = nn.Conv2d(r, r, 3, padding=1)
        self.conv3 = nn.Conv2d(r, 1, 3, padding=1)

    def forward(self, f_t):
        if f_t.dim() != 4 or f_t.shape[1] != self.in_channels:
            raise ShapeError(f"buffer must have {self.in_channels} channels, got {tuple(f_t.shape)}")
        return self.conv3(F.gelu(self.conv2(F.gelu(self.conv1(f_t)))))
