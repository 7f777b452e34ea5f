"""Segmentation on decoded latent features (M_x) or decoded pixels.

Both inputs go through the same path; only the head's input channel count
differs (``buffer_channels`` for features, 1 for pixels).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..codec import BitstreamContainer, decode_volume
from ..errors import ConfigError
from ..model import VVAE
from .metrics import dice, empty_mask_sentinel, hd95


@runtime_checkable
class SegmentationHead(Protocol):
    in_channels: int
    num_classes: int

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """(N, in_channels, H, W) -> logits (N, num_classes, H, W)."""


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GELU(), nn.Conv2d(cout, cout, 3, padding=1), nn.GELU())


class ReferenceSegHead(nn.Module):
    """Two-level encoder-decoder with one skip connection."""

    def __init__(self, in_channels: int, num_classes: int, width: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.width = width
        self.enc1 = _block(in_channels, width)
        self.enc2 = _block(width, 2 * width)
        self.up = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.dec = _block(2 * width, width)
        self.out = nn.Conv2d(width, num_classes, 1)
        # Per-channel input standardization, fitted from the training slices.
        self.register_buffer("in_mean", torch.zeros(1, in_channels, 1, 1))
        self.register_buffer("in_std", torch.ones(1, in_channels, 1, 1))

    def fit_input_stats(self, x: torch.Tensor):
        self.in_mean.copy_(x.mean(dim=(0, 2, 3), keepdim=True))
        self.in_std.copy_(x.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-6))

    def forward(self, x):
        x = (x - self.in_mean) / self.in_std
        h, w = x.shape[2:]
        ph, pw = -h % 2, -w % 2
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        d = self.dec(torch.cat([self.up(e2), e1], dim=1))
        return self.out(d)[:, :, :h, :w]

    def save(self, path):
        torch.save({"in_channels": self.in_channels, "num_classes": self.num_classes, "width": self.width, "state_dict": self.state_dict()}, path)

    @classmethod
    def load(cls, path) -> "ReferenceSegHead":
        d = torch.load(path, map_location="cpu", weights_only=True)
        head = cls(d["in_channels"], d["num_classes"], d["width"])
        head.load_state_dict(d["state_dict"])
        return head.eval()


def as_stack(x) -> np.ndarray:
    """Features (list of (C, H, W)) or pixels ((D, H, W) array / Volume) -> (D, C, H, W) float32."""
    if hasattr(x, "samples"):
        return (x.samples.astype(np.float32) / x.max_value)[:, None]
    if isinstance(x, (list, tuple)):
        return np.stack([np.asarray(f, dtype=np.float32) for f in x])
    arr = np.asarray(x, dtype=np.float32)
    return arr[:, None] if arr.ndim == 3 else arr


def extract_features(container: BitstreamContainer, model: VVAE) -> List[np.ndarray]:
    """Per-slice M_x from a bitstream, without running the reconstruction head."""
    return decode_volume(container, model, emit_features=True, pixels=False).features


def train_segmentation_head(
    inputs: Sequence,
    labels: Sequence[np.ndarray],
    num_classes: int,
    steps: int = 300,
    lr: float = 3e-3,
    batch: int = 8,
    seed: int = 0,
    head: Optional[nn.Module] = None,
) -> ReferenceSegHead:
    """Fit a head on slices pooled from several volumes with cross-entropy."""
    xs = np.concatenate([as_stack(x) for x in inputs])
    ys = np.concatenate([np.asarray(l, dtype=np.int64) for l in labels])
    if xs.shape[0] != ys.shape[0]:
        raise ConfigError("inputs and labels have different slice counts")
    torch.manual_seed(seed)
    if head is None:
        head = ReferenceSegHead(xs.shape[1], num_classes)
    x_t = torch.from_numpy(xs)
    y_t = torch.from_numpy(ys)
    if isinstance(head, ReferenceSegHead):
        head.fit_input_stats(x_t)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    head.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(len(x_t), size=min(batch, len(x_t)), replace=False))
        loss = F.cross_entropy(head(x_t[idx]), y_t[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return head.eval()


@torch.no_grad()
def predict(head: SegmentationHead, x) -> np.ndarray:
    stack = as_stack(x)
    if stack.shape[1] != head.in_channels:
        raise ConfigError(f"head expects {head.in_channels} input channels, got {stack.shape[1]}")
    logits = head(torch.from_numpy(stack))
    return logits.argmax(dim=1).numpy().astype(np.int64)


@dataclass
class SegmentationReport:
    dice: Dict[int, float]
    hd95: Dict[int, float]
    empty_policy: str = "one empty mask -> volume diagonal; both empty -> 0"

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(list(self.hd95.values())))

    def as_dict(self) -> dict:
        return {
            "dice": {str(k): v for k, v in self.dice.items()},
            "hd95": {str(k): v for k, v in self.hd95.items()},
            "mean_dice": self.mean_dice,
            "mean_hd95": self.mean_hd95,
            "hd95_empty_policy": self.empty_policy,
        }


def evaluate_segmentation(
    x,
    head: SegmentationHead,
    gt: np.ndarray,
    classes: Optional[Sequence[int]] = None,
    spacing=None,
    per_slice: bool = False,
) -> SegmentationReport:
    """Per-class DICE and HD95 of ``head``'s argmax prediction against ``gt``.

    ``classes`` defaults to every foreground class of the head. Metrics are
    computed over the whole volume, or averaged over slices with
    ``per_slice``.
    """
    gt = np.asarray(gt)
    pred = predict(head, x)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and labels {gt.shape} differ")
    if classes is None:
        classes = range(1, head.num_classes)
    d, h = {}, {}
    for c in classes:
        if per_slice:
            d[c] = float(np.mean([dice(p, g, c) for p, g in zip(pred, gt)]))
            h[c] = float(np.mean([hd95(p, g, c, None if spacing is None else spacing[1:]) for p, g in zip(pred, gt)]))
        else:
            d[c] = dice(pred, gt, c)
            h[c] = hd95(pred, gt, c, spacing)
    return SegmentationReport(d, h)
