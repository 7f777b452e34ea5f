"""Rate-distortion training with truncated backpropagation through slices.

The loss of one slice is ``bits / pixels + lambda * MSE`` with pixels in
[0, 1]; a training step sums it over a sub-sequence of at most
``gop_stride`` slices that starts from an all-zero buffer, so gradients
never cross a group boundary.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .codec import encode_volume, decode_volume
from .errors import CompatibilityError, ConfigError, NumericError
from .model import VVAE, load_checkpoint, load_state, read_checkpoint, save_checkpoint
from .transforms import ModelConfig
from .volume_io import Volume, load_vvol, normalize, pad_to_multiple

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

ABLATIONS = {"ckbd": "use_ckbd", "channelwise": "use_channelwise", "auxiliary": "use_auxiliary"}
MODEL_PRESETS = {"full": ModelConfig.full, "desk": ModelConfig.desk, "debug": ModelConfig.debug}
FULL_LAMBDAS = {
    "mrnet-axial": (2048, 4096, 8192, 16384),
    "mrnet-coronal": (4096, 8192, 16384, 32768),
    "mrnet-sagittal": (2048, 4096, 8192, 12288),
}


@dataclass
class TrainConfig:
    lmbda: float = 2048.0
    lr: float = 1e-4
    epochs: int = 200
    decay_every: int = 20
    decay_factor: float = 0.2
    gop_stride: int = 16
    batch: int = 1
    crop: int = 256
    seed: int = 0
    steps_per_epoch: int = 0  # 0 = one step per training volume
    eval_every: int = 1
    model: str = "full"
    model_overrides: Dict[str, int] = field(default_factory=dict)
    ablation: List[str] = field(default_factory=list)
    quant_mode: str = "ste"
    clip_grad: float = 0.0  # max global gradient norm; 0 disables clipping
    train_paths: List[str] = field(default_factory=list)
    eval_path: Optional[str] = None
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.lmbda > 0:
            raise ConfigError("lambda must be positive")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not self.clip_grad >= 0:
            raise ConfigError("clip_grad must be non-negative")
        if self.crop < 16 or self.crop % 16:
            raise ConfigError("crop must be a positive multiple of 16")
        if self.gop_stride < 1 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("gop_stride and batch must be >= 1, epochs >= 0")
        if self.model not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {self.model!r}")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}")
        if self.quant_mode not in ("ste", "noise"):
            raise ConfigError("quant_mode must be 'ste' or 'noise'")

    @classmethod
    def smoke(cls, **overrides) -> "TrainConfig":
        """Desk-scale settings for a few-minute overfit run."""
        base = dict(
            lmbda=8192.0, lr=1e-3, epochs=500, decay_every=400, crop=64, model="desk", steps_per_epoch=1, eval_every=100, clip_grad=1.0
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if "lambda" in d:
            d["lmbda"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if preset == "smoke":
                return cls.smoke(**d)
            if preset not in (None, "full"):
                raise ConfigError(f"unknown preset {preset!r}")
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: PathLike) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def model_config(self) -> ModelConfig:
        overrides = dict(self.model_overrides)
        for a in self.ablation:
            overrides[ABLATIONS[a]] = False
        return MODEL_PRESETS[self.model](**overrides)


def rd_loss(rate_bits, x, x_hat, lmbda: float, num_pixels: int):
    """``rate_bits / num_pixels + lmbda * MSE(x, x_hat)``."""
    mse = ((x - x_hat) ** 2).mean()
    loss = rate_bits / num_pixels + lmbda * mse
    if isinstance(loss, torch.Tensor):
        if not bool(torch.isfinite(loss)):
            raise NumericError("non-finite rate-distortion loss")
    elif not math.isfinite(loss):
        raise NumericError("non-finite rate-distortion loss")
    return loss


def sequence_loss(model: VVAE, seq: torch.Tensor, lmbda: float, mode: str = "ste", generator=None):
    """Summed loss over ``seq`` of shape (T, B, 1, H, W) starting from a zero buffer.

    Returns ``(loss, terms)`` where ``terms`` holds per-slice detached
    diagnostics.
    """
    t, b, _, h, w = seq.shape
    buffer = model.initial_buffer(b, h, w)
    total = 0.0
    y_bits = z_bits = mse_sum = 0.0
    for i in range(t):
        out = model(seq[i], buffer, mode=mode, generator=generator)
        yb = -torch.log2(out["y_likelihoods"]).sum()
        zb = -torch.log2(out["z_likelihoods"]).sum()
        loss_t = rd_loss(yb + zb, seq[i], out["x_hat"], lmbda, b * h * w)
        total = total + loss_t
        buffer = out["buffer"]
        y_bits += float(yb.detach())
        z_bits += float(zb.detach())
        mse_sum += float(((seq[i] - out["x_hat"].detach()) ** 2).mean())
    n = t * b * h * w
    terms = {"bpp_y": y_bits / n, "bpp_z": z_bits / n, "bpp_est": (y_bits + z_bits) / n, "mse": mse_sum / t}
    return total, terms


@dataclass
class TrainState:
    model: VVAE
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    generator: torch.Generator = None
    rng: np.random.Generator = None

    @classmethod
    def create(cls, config: TrainConfig, model: Optional[VVAE] = None) -> "TrainState":
        torch.manual_seed(config.seed)
        if model is None:
            model = VVAE(config.model_config())
        model.train()
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        gen = torch.Generator().manual_seed(config.seed)
        return cls(model, opt, config, generator=gen, rng=np.random.default_rng(config.seed))

    def current_lr(self) -> float:
        return self.config.lr * self.config.decay_factor ** (self.epoch // self.config.decay_every)

    def save(self, path: PathLike) -> None:
        torch.save(
            {
                "model_config": self.model.cfg.to_dict(),
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "train_config": dataclasses.asdict(self.config),
                "epoch": self.epoch,
                "step": self.step,
                "generator": self.generator.get_state(),
                "rng": self.rng.bit_generator.state,
            },
            path,
        )

    @classmethod
    def load(cls, path: PathLike) -> "TrainState":
        d = torch.load(path, map_location="cpu", weights_only=False)
        config = TrainConfig(**d["train_config"])
        model = VVAE(ModelConfig.from_dict(d["model_config"]))
        load_state(model, d["model"])
        model.train()
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        opt.load_state_dict(d["optimizer"])
        gen = torch.Generator()
        gen.set_state(d["generator"])
        rng = np.random.default_rng()
        rng.bit_generator.state = d["rng"]
        return cls(model, opt, config, d["epoch"], d["step"], gen, rng)


def train_step(group: torch.Tensor, state: TrainState) -> Dict[str, float]:
    """One optimizer update on ``group`` of shape (T, B, 1, H, W), T <= gop_stride."""
    if group.shape[0] > state.config.gop_stride:
        raise ConfigError(f"sub-sequence of {group.shape[0]} slices exceeds gop_stride")
    model = state.model
    model.train()
    for pg in state.optimizer.param_groups:
        pg["lr"] = state.current_lr()
    loss, terms = sequence_loss(model, group.to(model.dtype), state.config.lmbda, state.config.quant_mode, state.generator)
    state.optimizer.zero_grad()
    loss.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    grad_norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
    if not math.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient (loss={float(loss)}, terms={terms})")
    if state.config.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), state.config.clip_grad)
    state.optimizer.step()
    state.step += 1
    return {"loss": float(loss.detach()) / group.shape[0], "grad_norm": grad_norm, **terms}


def volume_tensor(v: Volume) -> torch.Tensor:
    """Normalized, padded slices as a (D, 1, H, W) float32 tensor."""
    arr = np.stack([pad_to_multiple(s, 16)[0].values for s in normalize(v)])
    return torch.from_numpy(arr).float()[:, None]


def sample_batch(volumes: Sequence[torch.Tensor], config: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random contiguous sub-sequences with 16-aligned spatial crops: (T, B, 1, c, c)."""
    length = min(config.gop_stride, min(v.shape[0] for v in volumes))
    crop_h = min(config.crop, min(v.shape[2] for v in volumes))
    crop_w = min(config.crop, min(v.shape[3] for v in volumes))
    items = []
    for _ in range(config.batch):
        v = volumes[rng.integers(len(volumes))]
        t0 = rng.integers(v.shape[0] - length + 1)
        i0 = 16 * rng.integers((v.shape[2] - crop_h) // 16 + 1)
        j0 = 16 * rng.integers((v.shape[3] - crop_w) // 16 + 1)
        items.append(v[t0 : t0 + length, :, i0 : i0 + crop_h, j0 : j0 + crop_w])
    return torch.stack(items, dim=1)


@torch.no_grad()
def noise_estimate_bpp(model: VVAE, v: Volume, gop_stride: int = 16, draws: int = 4, seed: int = 0) -> float:
    """Rate estimate under the additive-noise relaxation, averaged over draws."""
    x = volume_tensor(v)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(draws):
        for start in range(0, v.depth, gop_stride):
            _, terms = sequence_loss(model, x[start : start + gop_stride, None], 1.0, "ste", gen)
            total += terms["bpp_est"] * min(gop_stride, v.depth - start)
    hp, wp = x.shape[2:]
    return total / draws / v.depth * (hp * wp) / (v.height * v.width)


def psnr_volume(a: np.ndarray, b: np.ndarray, max_val: float) -> float:
    from .analytics.metrics import psnr

    return psnr(a, b, max_val)


@torch.no_grad()
def evaluate_codec(model: VVAE, v: Volume, gop_stride: int = 16, lmbda: Optional[float] = None) -> dict:
    """Real-coder bpp and PSNR on ``v``, plus the noise-relaxed rate estimate."""
    model.eval()
    container, stats = encode_volume(v, model, gop_stride, return_stats=True)
    rec = decode_volume(container, model).volume
    mse = float(np.mean((rec.samples.astype(np.float64) - v.samples) ** 2)) / v.max_value**2
    out = {
        "bpp_real": container.bpp(),
        "bpp_est": noise_estimate_bpp(model, v, gop_stride),
        "psnr": psnr_volume(rec.samples, v.samples, v.max_value),
        "mse": mse,
        "slice_bpp": [s.bpp for s in stats],
    }
    if lmbda is not None:
        out["rd_loss"] = out["bpp_real"] + lmbda * mse
    return out


METRIC_FIELDS = ["step", "epoch", "loss", "bpp_est", "bpp_real", "psnr"]


def _run(state: TrainState, config: TrainConfig) -> Path:
    if not config.train_paths:
        raise ConfigError("no training volumes configured")
    volumes = [volume_tensor(load_vvol(p)) for p in config.train_paths]
    eval_vol = load_vvol(config.eval_path) if config.eval_path else load_vvol(config.train_paths[0])
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(dataclasses.asdict(config), indent=2))
    steps = config.steps_per_epoch or len(volumes)
    best_path = out_dir / "best.ckpt"
    best = math.inf
    meta = {"lambda": config.lmbda, "distortion": "mse on [0,1] pixels", "rate": "bits per pixel", "ablation": config.ablation}
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        while state.epoch < config.epochs:
            for _ in range(steps):
                m = train_step(sample_batch(volumes, config, state.rng), state)
                writer.writerow({"step": state.step, "epoch": state.epoch, "loss": m["loss"], "bpp_est": m["bpp_est"], "bpp_real": "", "psnr": ""})
            state.epoch += 1
            if state.epoch % config.eval_every == 0 or state.epoch == config.epochs:
                ev = evaluate_codec(state.model, eval_vol, config.gop_stride, config.lmbda)
                state.model.train()
                writer.writerow({"step": state.step, "epoch": state.epoch, "loss": ev["rd_loss"], "bpp_est": ev["bpp_est"], "bpp_real": ev["bpp_real"], "psnr": ev["psnr"]})
                fh.flush()
                log.info("epoch %d step %d: bpp %.4f psnr %.2f", state.epoch, state.step, ev["bpp_real"], ev["psnr"])
                if ev["rd_loss"] < best:
                    best = ev["rd_loss"]
                    save_checkpoint(state.model, best_path, {**meta, "epoch": state.epoch, "step": state.step, **{k: ev[k] for k in ("bpp_real", "psnr")}})
    save_checkpoint(state.model, out_dir / "last.ckpt", {**meta, "epoch": state.epoch, "step": state.step})
    if not best_path.exists():
        save_checkpoint(state.model, best_path, meta)
    return best_path


def train(config: TrainConfig) -> Path:
    """Train from scratch; returns the path of the best checkpoint."""
    return _run(TrainState.create(config), config)


def finetune(checkpoint: PathLike, config: TrainConfig) -> Path:
    """Continue training from ``checkpoint`` weights with a fresh optimizer."""
    model, _ = load_checkpoint(checkpoint)
    if model.cfg != config.model_config():
        raise CompatibilityError("checkpoint architecture does not match the fine-tuning config")
    return _run(TrainState.create(config, model), config)
