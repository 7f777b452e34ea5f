"""The recurrent volumetric autoencoder and its checkpoint format."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .entropy.context import ContextModel
from .entropy.models import FactorizedPrior, quantize_train, round_half_away, ste_round
from .errors import CompatibilityError, ConfigError, ShapeError
from .transforms import (
    GDN,
    Analysis,
    Fusion,
    HyperAnalysis,
    HyperSynthesis,
    InterSliceAnalysis,
    InterSliceSynthesis,
    ModelConfig,
    ReconstructionHead,
    Synthesis,
)

CHECKPOINT_FORMAT = "vvmic-checkpoint"
CHECKPOINT_VERSION = 1


def hyper_size(n: int) -> int:
    """Hyper-latent extent for a latent extent ``n`` (two stride-2 stages)."""
    return -(-n // 4)


class VVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.g_a = Analysis(cfg)
        self.g_s = Synthesis(cfg)
        self.h_a = HyperAnalysis(cfg)
        self.h_s = HyperSynthesis(cfg)
        self.prior = FactorizedPrior(cfg.hyper_channels)
        self.context = ContextModel(cfg)
        self.fusion = Fusion(cfg)
        self.reconstruct = ReconstructionHead(cfg)
        if cfg.use_auxiliary:
            self.f_a = InterSliceAnalysis(cfg)
            self.f_s = InterSliceSynthesis(cfg)
        else:
            self.f_a = None
            self.f_s = None

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def initial_buffer(self, n: int, h: int, w: int) -> torch.Tensor:
        return torch.zeros(n, self.cfg.buffer_channels, h, w, dtype=self.dtype)

    def inter_slice_analysis(self, buffer: torch.Tensor):
        if self.f_a is None:
            return None, None, None, None
        if buffer.shape[1] != self.cfg.buffer_channels:
            raise ShapeError(f"buffer must have {self.cfg.buffer_channels} channels")
        return self.f_a(buffer)

    def decode_features(self, y_hat: torch.Tensor, lf: Optional[torch.Tensor]):
        """Decoder-side path shared by encoder and decoder: returns (M_x, F_t)."""
        if self.f_s is not None:
            d1, d2, m_f = self.f_s(lf)
        else:
            d1 = d2 = m_f = None
        m_x = self.g_s(y_hat, d1, d2)
        return m_x, self.fusion(m_x, m_f)

    def forward(
        self,
        x: torch.Tensor,
        buffer: torch.Tensor,
        mode: str = "ste",
        generator: Optional[torch.Generator] = None,
    ) -> Dict[str, torch.Tensor]:
        """One step of the slice recurrence with relaxed quantization."""
        if x.shape[2:] != buffer.shape[2:]:
            raise ShapeError(f"slice {tuple(x.shape)} and buffer {tuple(buffer.shape)} sizes differ")
        e1, e2, e3, lf = self.inter_slice_analysis(buffer)
        y = self.g_a(x, e1, e2, e3)
        z = self.h_a(y)
        if mode == "round":
            z_hat = round_half_away(z)
            z_scored = z_hat
        else:
            z_scored = quantize_train(z, generator)
            z_hat = z_scored if mode == "noise" else ste_round(z)
        z_lik = self.prior.likelihood(z_scored)
        psi = self.h_s(z_hat, y.shape[2:])
        y_hat, y_lik, _, _ = self.context(y, psi, lf, mode=mode, generator=generator)
        m_x, f_t = self.decode_features(y_hat, lf)
        x_hat = self.reconstruct(f_t)
        return {"x_hat": x_hat, "y_likelihoods": y_lik, "z_likelihoods": z_lik, "buffer": f_t, "m_x": m_x}

    def validate(self):
        """Raise if any GDN layer has non-positive beta or negative gamma."""
        for name, mod in self.named_modules():
            if isinstance(mod, GDN):
                beta, gamma = mod.beta, mod.gamma
                if not bool(torch.isfinite(beta).all()) or bool((beta <= 0).any()):
                    raise ConfigError(f"{name}: GDN beta must be finite and positive")
                if not bool(torch.isfinite(gamma).all()) or bool((gamma < 0).any()):
                    raise ConfigError(f"{name}: GDN gamma must be finite and non-negative")


def _config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def state_digest(model: VVAE) -> str:
    h = hashlib.sha256(_config_json(model.cfg).encode())
    for key, value in sorted(model.state_dict().items()):
        h.update(key.encode())
        h.update(np.ascontiguousarray(value.detach().cpu().float().numpy()).tobytes())
    return h.hexdigest()


def model_id(model: VVAE) -> bytes:
    """16-byte identifier of architecture plus weights, embedded in bitstreams."""
    return hashlib.sha256(("model-id:" + state_digest(model)).encode()).digest()[:16]


def save_checkpoint(model: VVAE, path: Union[str, Path], metadata: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "metadata": dict(metadata or {}),
        "digest": state_digest(model),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: Union[str, Path]) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CompatibilityError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CompatibilityError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path: Union[str, Path], expect: Optional[ModelConfig] = None):
    """Return ``(model, metadata)``; the model is in eval mode with float32 weights."""
    payload = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(payload["config"])
    except (ConfigError, TypeError) as exc:
        raise CompatibilityError(f"{path}: invalid architecture config ({exc})") from exc
    if expect is not None and cfg != expect:
        raise CompatibilityError(f"{path}: architecture {cfg} does not match {expect}")
    model = VVAE(cfg)
    load_state(model, payload["state_dict"])
    model.validate()
    model.eval()
    return model, payload.get("metadata", {})


def load_state(model: VVAE, state: dict) -> None:
    own = model.state_dict()
    if set(own) != set(state):
        missing = sorted(set(own) - set(state))[:3]
        extra = sorted(set(state) - set(own))[:3]
        raise CompatibilityError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for k, v in state.items():
        if own[k].shape != v.shape:
            raise CompatibilityError(f"{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
    model.load_state_dict(state)
