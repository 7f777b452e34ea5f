"""Reference implementations used as test oracles."""

import itertools

import numpy as np
import torch

from vvmic.entropy.cdf import build_cdf
from vvmic.entropy.context import ContextModel
from vvmic.entropy.rangecoder import RangeDecoder
from vvmic.model import VVAE
from vvmic.training import sequence_loss
from vvmic.transforms import ModelConfig


def latent_case(seed: int, size: int = 8, cfg: ModelConfig = None, scale: float = 3.0):
    """A context model plus random y, Psi and L_F at ``size`` x ``size``."""
    cfg = cfg or ModelConfig.debug()
    torch.manual_seed(seed)
    ctx = ContextModel(cfg).eval()
    g = torch.Generator().manual_seed(seed + 1)
    y = scale * torch.randn(1, cfg.latent_channels, size, size, generator=g)
    psi = torch.randn(1, cfg.hyper_out_channels, size, size, generator=g)
    lf = torch.randn(1, cfg.aux_latent_channels, size, size, generator=g) if cfg.use_auxiliary else None
    return ctx, y, psi, lf


def canonical_positions(ctx: ContextModel, h: int, w: int):
    """(k, p, channel, i, j) in bitstream order."""
    for k, (lo, hi) in enumerate(ctx.plan.boundaries):
        for p in range(ctx.num_passes):
            mask = ctx.pass_mask(p, h, w)
            for c in range(lo, hi):
                for i, j in itertools.product(range(h), range(w)):
                    if mask[i, j]:
                        yield k, p, c, i, j


@torch.no_grad()
def decode_serial(ctx: ContextModel, data: bytes, psi, lf):
    """Decode one symbol at a time, recomputing the parameters before each one."""
    h, w = psi.shape[2:]
    y_hat = torch.zeros(1, ctx.cfg.latent_channels, h, w, dtype=psi.dtype)
    dec = RangeDecoder(data)
    symbols = []
    for k, p, c, i, j in canonical_positions(ctx, h, w):
        lo = ctx.plan.boundaries[k][0]
        mu, sigma = ctx.group_params(k, p, y_hat, psi, lf)
        s = dec.decode(build_cdf(float(sigma[0, c - lo, i, j].double())))
        symbols.append(s)
        y_hat[0, c, i, j] = s + mu[0, c - lo, i, j]
    dec.check_end()
    return y_hat, symbols


@torch.no_grad()
def all_params(ctx: ContextModel, y_hat, psi, lf):
    """{(k, p): (mu, sigma)} as seen by the decoder for a fully decoded ``y_hat``.

    Each (k, p) is evaluated on the state a decoder holds at that point:
    groups < k complete, anchors of group k present when p == 1.
    """
    h, w = y_hat.shape[2:]
    out = {}
    for k, (lo, hi) in enumerate(ctx.plan.boundaries):
        for p in range(ctx.num_passes):
            state = y_hat.clone()
            state[:, lo:] = 0
            if p == 1:
                anchors = ctx.pass_mask(0, h, w)
                state[:, lo:hi] = torch.where(anchors, y_hat[:, lo:hi], torch.zeros(()))
            out[k, p] = tuple(t.clone() for t in ctx.group_params(k, p, state, psi, lf))
    return out


def hd95_exhaustive(pred, gt, class_id=1, spacing=None):
    """Brute-force HD95 with explicit boundary extraction and pairwise distances."""
    a = np.asarray(pred) == class_id
    b = np.asarray(gt) == class_id
    if not a.any() and not b.any():
        return 0.0
    s = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=float)
    if not a.any() or not b.any():
        return float(np.sqrt(np.sum((np.array(a.shape) * s) ** 2)))

    def border(m):
        pts = []
        for idx in zip(*np.nonzero(m)):
            for ax in range(m.ndim):
                for d in (-1, 1):
                    n = list(idx)
                    n[ax] += d
                    if n[ax] < 0 or n[ax] >= m.shape[ax] or not m[tuple(n)]:
                        pts.append(idx)
                        break
                else:
                    continue
                break
        return np.array(pts, dtype=float) * s

    pa, pb = border(a), border(b)
    dist = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    d = np.concatenate([dist.min(axis=1), dist.min(axis=0)])
    return float(np.percentile(d, 95))


def gradient_check(seed=0, samples=40, eps=1e-6):
    """Analytic vs central-difference gradient of the full RD loss at 64-bit.

    Uses the noise relaxation for both the rate and the synthesis input with
    fixed noise, so the loss is a smooth function of the parameters.
    """
    torch.manual_seed(seed)
    model = VVAE(ModelConfig.debug()).double()
    seq = torch.rand(2, 1, 1, 32, 32, dtype=torch.float64)

    def loss_fn():
        return sequence_loss(model, seq, 8192.0, "noise", torch.Generator().manual_seed(seed))[0]

    params = [p for p in model.parameters()]
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    flat = [(pi, int(j)) for pi, p in enumerate(params) for j in rng.choice(p.numel(), size=min(2, p.numel()), replace=False)]
    picks = [flat[i] for i in rng.choice(len(flat), size=min(samples, len(flat)), replace=False)]
    analytic, numeric = [], []
    with torch.no_grad():
        for pi, j in picks:
            p = params[pi].view(-1)
            orig = float(p[j])
            p[j] = orig + eps
            up = float(loss_fn())
            p[j] = orig - eps
            down = float(loss_fn())
            p[j] = orig
            analytic.append(float(params[pi].grad.view(-1)[j]))
            numeric.append((up - down) / (2 * eps))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / np.linalg.norm(n)), a, n
