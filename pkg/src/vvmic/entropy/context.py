"""Multi-dimensional context model for the quantized latent.

The latent's channels are split into K equal groups decoded in order. Each
group is decoded in two checkerboard passes (anchors, then non-anchors).
The Gaussian parameters of a symbol are computed from

* the spatial context of the group's anchors (zero in the anchor pass),
* the channel context of all earlier groups (zero for the first group),
* the inter-slice latent prior L_F,
* the hyper-decoder output Psi,

concatenated and passed through a per-group 1x1 convolution stack.
Disabling ``use_ckbd`` collapses the two passes into one; disabling
``use_channelwise`` or ``use_auxiliary`` drops the corresponding input.

Canonical symbol order (part of the bitstream format): group by group,
pass by pass, and within a pass channel-major then raster order over the
positions selected by the pass mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError
from ..transforms import ModelConfig
from .cdf import SIGMA_MIN

# exp(8) ~ 3000 is far above any useful scale; the cap keeps exp finite.
SIGMA_LOG_MAX = 8.0
from .models import gaussian_likelihood, quantize_train, ste_round, round_half_away


def anchor_mask(h: int, w: int) -> torch.Tensor:
    """Boolean (h, w) grid, True where ``(i + j)`` is even."""
    if h < 1 or w < 1:
        raise ValueError("mask dimensions must be >= 1")
    i = torch.arange(h).reshape(-1, 1)
    j = torch.arange(w).reshape(1, -1)
    return (i + j) % 2 == 0


@dataclass(frozen=True)
class ChannelSlicePlan:
    num_channels: int
    num_slices: int

    def __post_init__(self):
        if self.num_slices < 1 or self.num_channels % self.num_slices:
            raise ValueError("channels must divide evenly into slices")

    @property
    def size(self) -> int:
        return self.num_channels // self.num_slices

    @property
    def boundaries(self) -> List[Tuple[int, int]]:
        s = self.size
        return [(k * s, (k + 1) * s) for k in range(self.num_slices)]


class SpatialContext(nn.Module):
    """5x5 convolution over the anchors of one channel group."""

    def __init__(self, group_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(group_channels, out_channels, 5, padding=2)

    def forward(self, y_group: torch.Tensor) -> torch.Tensor:
        mask = anchor_mask(*y_group.shape[-2:]).to(y_group.dtype)
        return self.conv(y_group * mask)


class ChannelContext(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )

    def forward(self, y_prev: torch.Tensor) -> torch.Tensor:
        if y_prev.shape[1] != self.in_channels:
            raise ShapeError(f"channel context expects {self.in_channels} channels, got {y_prev.shape[1]}")
        return self.net(y_prev)


class EntropyParameters(nn.Module):
    """1x1 convolution stack emitting (mu, sigma) for one channel group."""

    def __init__(self, in_channels: int, hidden: int, group_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.group_channels = group_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, 2 * group_channels, 1),
        )

    def forward(self, ctx: torch.Tensor):
        if ctx.shape[1] != self.in_channels:
            raise ShapeError(f"entropy parameters expect {self.in_channels} channels, got {ctx.shape[1]}")
        mu, s = self.net(ctx).chunk(2, dim=1)
        sigma = torch.exp(s.clamp(max=SIGMA_LOG_MAX)).clamp_min(SIGMA_MIN)
        return mu, sigma


class ContextModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.plan = ChannelSlicePlan(cfg.latent_channels, cfg.num_slices)
        g, c = self.plan.size, cfg.context_channels
        self.spatial = nn.ModuleList(SpatialContext(g, c) for _ in range(cfg.num_slices)) if cfg.use_ckbd else None
        self.channel = (
            nn.ModuleList(ChannelContext(k * g, c) for k in range(1, cfg.num_slices)) if cfg.use_channelwise else None
        )
        in_ch = cfg.hyper_out_channels
        in_ch += c if cfg.use_ckbd else 0
        in_ch += c if cfg.use_channelwise else 0
        in_ch += cfg.aux_latent_channels if cfg.use_auxiliary else 0
        self.params = nn.ModuleList(EntropyParameters(in_ch, cfg.ep_hidden, g) for _ in range(cfg.num_slices))

    @property
    def num_passes(self) -> int:
        return 2 if self.cfg.use_ckbd else 1

    def pass_mask(self, p: int, h: int, w: int) -> torch.Tensor:
        if not self.cfg.use_ckbd:
            return torch.ones(h, w, dtype=torch.bool)
        m = anchor_mask(h, w)
        return m if p == 0 else ~m

    def spatial_ctx(self, k: int, p: int, y_hat: torch.Tensor) -> Optional[torch.Tensor]:
        if not self.cfg.use_ckbd:
            return None
        lo, hi = self.plan.boundaries[k]
        if p == 0:
            # Anchors have no spatial context.
            n, _, h, w = y_hat.shape
            return y_hat.new_zeros(n, self.cfg.context_channels, h, w)
        return self.spatial[k](y_hat[:, lo:hi])

    def channel_ctx(self, k: int, y_hat: torch.Tensor) -> Optional[torch.Tensor]:
        if not self.cfg.use_channelwise:
            return None
        if k == 0:
            n, _, h, w = y_hat.shape
            return y_hat.new_zeros(n, self.cfg.context_channels, h, w)
        lo, _ = self.plan.boundaries[k]
        return self.channel[k - 1](y_hat[:, :lo])

    def entropy_params(self, k, phi_sp, phi_ch, lf, psi):
        parts = [t for t in (phi_sp, phi_ch, lf if self.cfg.use_auxiliary else None, psi) if t is not None]
        size = psi.shape[2:]
        for t in parts:
            if t.shape[2:] != size:
                raise ShapeError(f"context tensor {tuple(t.shape)} not at latent resolution {tuple(size)}")
        return self.params[k](torch.cat(parts, dim=1))

    def group_params(self, k: int, p: int, y_hat: torch.Tensor, psi: torch.Tensor, lf: Optional[torch.Tensor]):
        """(mu, sigma) for group ``k`` in pass ``p`` given the decoded-so-far latent."""
        if self.cfg.use_auxiliary and lf is None:
            raise ShapeError("L_F is required when the auxiliary path is enabled")
        return self.entropy_params(k, self.spatial_ctx(k, p, y_hat), self.channel_ctx(k, y_hat), lf, psi)

    def forward(
        self,
        y: torch.Tensor,
        psi: torch.Tensor,
        lf: Optional[torch.Tensor],
        mode: str = "ste",
        generator: Optional[torch.Generator] = None,
    ):
        """Differentiable counterpart of the decoding schedule.

        ``mode`` selects what later contexts and the synthesis see:
        ``"ste"`` uses mean-centred rounding with a straight-through gradient,
        ``"noise"`` uses the noisy latent throughout, ``"round"`` uses hard
        rounding (evaluation). The rate term always uses the noisy latent,
        except in ``"round"`` mode where the coded symbols are scored.

        Returns ``(y_hat, likelihoods, mu, sigma)``.
        """
        if mode not in ("ste", "noise", "round"):
            raise ValueError(f"unknown quantization mode {mode!r}")
        if y.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"latent must have {self.cfg.latent_channels} channels")
        y_noisy = y if mode == "round" else quantize_train(y, generator)
        y_hat = torch.zeros_like(y)
        mu_all = torch.zeros_like(y)
        sigma_all = torch.ones_like(y)
        h, w = y.shape[2:]
        for k, (lo, hi) in enumerate(self.plan.boundaries):
            for p in range(self.num_passes):
                mask = self.pass_mask(p, h, w).to(y.device)
                mu, sigma = self.group_params(k, p, y_hat, psi, lf)
                if mode == "noise":
                    q = y_noisy[:, lo:hi]
                elif mode == "ste":
                    q = ste_round(y[:, lo:hi] - mu) + mu
                else:
                    q = round_half_away(y[:, lo:hi] - mu) + mu
                y_hat = _assign(y_hat, lo, hi, mask, q)
                mu_all = _assign(mu_all, lo, hi, mask, mu)
                sigma_all = _assign(sigma_all, lo, hi, mask, sigma)
        scored = y_hat if mode == "round" else y_noisy
        likelihoods = gaussian_likelihood(scored, sigma_all, mu_all)
        return y_hat, likelihoods, mu_all, sigma_all


def _assign(t: torch.Tensor, lo: int, hi: int, mask: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Out-of-place ``t[:, lo:hi][..., mask] = values[..., mask]``."""
    full = torch.zeros(t.shape[1], *mask.shape, dtype=torch.bool, device=t.device)
    full[lo:hi] = mask
    padded = F.pad(values, (0, 0, 0, 0, lo, t.shape[1] - hi))
    return torch.where(full, padded, t)
