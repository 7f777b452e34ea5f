"""Quantizers and probability models for latents and hyper-latents."""

from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr

from ..errors import ConfigError, NumericError
from .cdf import SIGMA_MIN, TAIL, CdfTable, tables_from_pmf

LIKELIHOOD_FLOOR = 2.0**-16
_INV_SQRT2 = 1 / math.sqrt(2.0)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class _StraightThroughRound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return round_half_away(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


def ste_round(x: torch.Tensor) -> torch.Tensor:
    """Round half away from zero with an identity gradient."""
    return _StraightThroughRound.apply(x)


def quantize_train(y: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Additive uniform noise in [-0.5, 0.5), the training proxy for rounding."""
    u = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
    return y + u


def quantize_eval(y: torch.Tensor, mu: torch.Tensor):
    """Mean-centred rounding. Returns ``(y_hat, symbols)``."""
    s = round_half_away(y - mu)
    return s + mu, s


def symbols_to_int(s: torch.Tensor) -> np.ndarray:
    return s.detach().cpu().numpy().astype(np.int64)


def gaussian_likelihood(
    values: torch.Tensor, sigma: torch.Tensor, mu: Optional[torch.Tensor] = None, floor: bool = True
) -> torch.Tensor:
    """Probability mass of the unit-width bin around ``values`` under N(mu, sigma)."""
    v = values - mu if mu is not None else values
    sigma = sigma.clamp_min(SIGMA_MIN)
    # Evaluate in the lower tail for accuracy: the pmf is symmetric in |v|.
    v = v.abs()
    upper = 0.5 * torch.erfc((v - 0.5) / sigma * _INV_SQRT2)
    lower = 0.5 * torch.erfc((v + 0.5) / sigma * _INV_SQRT2)
    p = upper - lower
    if floor:
        p = p.clamp_min(LIKELIHOOD_FLOOR)
    return p


def gaussian_likelihood_np(s, sigma) -> np.ndarray:
    s = np.abs(np.asarray(s, dtype=np.float64))
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    p = ndtr((0.5 - s) / sigma) - ndtr((-0.5 - s) / sigma)
    return np.maximum(p, LIKELIHOOD_FLOOR)


def estimate_rate(likelihoods) -> float | torch.Tensor:
    """Total information content in bits, ``sum(-log2 p)``."""
    if isinstance(likelihoods, torch.Tensor):
        if bool((likelihoods <= 0).any()) or not bool(torch.isfinite(likelihoods).all()):
            raise NumericError("likelihoods must lie in (0, 1]")
        return -torch.log2(likelihoods).sum()
    p = np.asarray(likelihoods, dtype=np.float64)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise NumericError("likelihoods must lie in (0, 1]")
    return float(-np.log2(p).sum())


class FactorizedPrior(nn.Module):
    """Per-channel non-parametric density built from monotone layers.

    The cumulative function is a composition of affine maps with
    non-negative weights (softplus) and ``x + a * tanh(x)`` nonlinearities
    with ``a >= -1`` (tanh), followed by a sigmoid, so it is monotone by
    construction.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, n)
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m), x) + b
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """Evaluate the learned CDF on ``x`` of shape (channels, n)."""
        return torch.sigmoid(self._logits_cumulative(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, z: torch.Tensor, floor: bool = True) -> torch.Tensor:
        """Bin probabilities for ``z`` of shape (B, C, H, W)."""
        b, c, h, w = z.shape
        if c != self.channels:
            raise ConfigError(f"prior has {self.channels} channels, input has {c}")
        v = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits_cumulative(v - 0.5)
        upper = self._logits_cumulative(v + 0.5)
        # Difference taken on the side where both sigmoids are small.
        sign = -torch.sign(lower + upper).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        if floor:
            p = p.clamp_min(LIKELIHOOD_FLOOR)
        return p.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def tables(self, tail: int = TAIL) -> List[CdfTable]:
        """One quantized table per channel over symbols [-tail, tail]."""
        support = torch.arange(-tail, tail + 1, dtype=torch.float64)
        edges = torch.cat([support - 0.5, support[-1:] + 0.5])
        grid = edges.expand(self.channels, -1)
        c = self._cdf64(grid).numpy()
        if np.any(np.diff(c, axis=1) < 0):
            raise ConfigError("factorized prior CDF is not monotone")
        pmf = np.diff(c, axis=1)
        tail_mass = c[:, 0] + (1.0 - c[:, -1])
        return tables_from_pmf(pmf, tail_mass, -tail)

    def _cdf64(self, grid: torch.Tensor) -> torch.Tensor:
        x = grid.unsqueeze(1)
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m.double()), x) + b.double()
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i].double()) * torch.tanh(x)
        return torch.sigmoid(x).squeeze(1)
