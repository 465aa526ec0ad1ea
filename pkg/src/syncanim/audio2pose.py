"""Audio-to-pose generator with stability and diversity conditioning.

Predicts z-score pose offsets (3 angles + 3 translations) from a windowed
audio feature context.  Two conditional vectors are fused into the
generator bottleneck: a stability vector built from a reference pose
offset (previous frame during training), and a diversity vector sampled
from a VAE over target offsets.  During training the VAE encodes the
ground-truth offset (reparameterized); at inference the latent comes from
the unit Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpointio
from .audiofeat import WindowedFeatures
from .errors import MissingTarget, NonFiniteLoss, ShapeMismatch
from .nets import DropoutMLP, TemporalUNet, mlp, seeded_noise
from .posemath import (
    DEFAULT_CLAMP_WIDTH,
    EulerAngles,
    PoseOffset,
    PoseStats,
    Translation,
)

POSE_DIM = 6  # (alpha, beta, gamma, x, y, z) offsets


@dataclass(frozen=True)
class StabilityConfig:
    noise_mean: float = 0.0
    noise_std: float = 0.1
    dropout_rate: float = 0.6
    hidden_dims: tuple[int, ...] = (32,)
    out_dim: int = 32


@dataclass(frozen=True)
class Audio2PoseConfig:
    feat_dim: int = 80
    window: int = 4  # neighbor frames per side; U-Net sees 2*window+1 rows
    latent_dim: int = 8
    cond_dim: int = 32
    unet_channels: tuple[int, ...] = (32, 48, 64)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    clamp_width: float = DEFAULT_CLAMP_WIDTH
    lambda_kl: float = 0.1
    lambda_reg: float = 1.0
    # ablation switches: a disabled conditional vector is replaced by zeros
    use_stability: bool = True
    use_diversity: bool = True

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Audio2PoseConfig":
        d = dict(d)
        d["stability"] = StabilityConfig(**{
            k: tuple(v) if k == "hidden_dims" else v for k, v in d["stability"].items()
        })
        d["unet_channels"] = tuple(d["unet_channels"])
        return Audio2PoseConfig(**d)


def gaussian_kl(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, exp(log_var)) || N(0, I) ), summed over the last axis."""
    return 0.5 * (mu.square() + log_var.exp() - 1.0 - log_var).sum(dim=-1)


class DiversityVAE(nn.Module):
    """Plain VAE over target offsets; the decoded latent conditions the generator."""

    def __init__(self, target_dim: int, latent_dim: int, cond_dim: int, hidden: int = 32,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.latent_dim = latent_dim
        self.encoder = mlp([target_dim, hidden, 2 * latent_dim], dtype=dtype)
        self.decoder = mlp([latent_dim, hidden, cond_dim], dtype=dtype)

    def encode(self, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        stats = self.encoder(target)
        return stats[..., : self.latent_dim], stats[..., self.latent_dim :]

    def forward(self, target: torch.Tensor | None, rng: torch.Generator, mode: str,
                batch: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
        """mode: train (reparameterized posterior), reconstruct (posterior mean),
        or sample (prior draw, zero KL)."""
        dtype = self.decoder[0].weight.dtype
        if mode in ("train", "reconstruct"):
            if target is None:
                raise MissingTarget("train mode requires the ground-truth offsets")
            mu, log_var = self.encode(target)
            if mode == "train":
                eps = torch.randn(mu.shape, generator=rng, dtype=dtype)
                z = mu + eps * torch.exp(0.5 * log_var)
            else:
                z = mu
            return self.decoder(z), gaussian_kl(mu, log_var)
        if mode == "sample":
            z = torch.randn((batch, self.latent_dim), generator=rng, dtype=dtype)
            return self.decoder(z), torch.zeros(batch, dtype=dtype)
        raise ValueError(f"unknown mode {mode!r}")


class StabilityNet(nn.Module):
    """MLP over a reference offset; Gaussian noise and dropout only while training."""

    def __init__(self, in_dim: int, cfg: StabilityConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.net = DropoutMLP([in_dim, *cfg.hidden_dims, cfg.out_dim], cfg.dropout_rate, dtype=dtype)

    def forward(self, ref: torch.Tensor, rng: torch.Generator, training: bool) -> torch.Tensor:
        if training and self.cfg.noise_std > 0:
            ref = ref + seeded_noise(tuple(ref.shape), self.cfg.noise_mean,
                                     self.cfg.noise_std, rng, ref.dtype)
        return self.net(ref, rng, training)


class PoseGenerator(nn.Module):
    """Temporal U-Net over the audio window; tanh-scaled offset heads."""

    def __init__(self, cfg: Audio2PoseConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.clamp_width = cfg.clamp_width
        cond = cfg.cond_dim + cfg.stability.out_dim
        self.unet = TemporalUNet(cfg.feat_dim, cond, cfg.unet_channels, dtype=dtype)
        self.head_e = mlp([self.unet.out_dim, 32, 3], dtype=dtype)
        self.head_t = mlp([self.unet.out_dim, 32, 3], dtype=dtype)

    def forward(self, windows: torch.Tensor, d_vec: torch.Tensor, s_vec: torch.Tensor) -> torch.Tensor:
        shared = self.unet(windows, torch.cat([d_vec, s_vec], dim=-1))
        off_e = torch.tanh(self.head_e(shared)) * self.clamp_width
        off_t = torch.tanh(self.head_t(shared)) * self.clamp_width
        return torch.cat([off_e, off_t], dim=-1)


class Audio2PoseModel(nn.Module):
    def __init__(self, cfg: Audio2PoseConfig, stats: PoseStats, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.stats = stats
        self.dtype = dtype
        self.stability = StabilityNet(POSE_DIM, cfg.stability, dtype=dtype)
        self.diversity = DiversityVAE(POSE_DIM, cfg.latent_dim, cfg.cond_dim, dtype=dtype)
        self.generator = PoseGenerator(cfg, dtype=dtype)

    def expected_window(self) -> int:
        return 2 * self.cfg.window + 1


def make_stability_vector(
    prev_offset: PoseOffset, model: Audio2PoseModel, rng: torch.Generator, training: bool
) -> torch.Tensor:
    ref = torch.as_tensor(prev_offset.as_array(), dtype=model.dtype).unsqueeze(0)
    return model.stability(ref, rng, training).squeeze(0)


def make_diversity_vector(
    target_offset: np.ndarray | None,
    model: Audio2PoseModel,
    rng: torch.Generator,
    mode: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    target = None
    if target_offset is not None:
        target = torch.as_tensor(np.asarray(target_offset), dtype=model.dtype).reshape(1, POSE_DIM)
    d, kl = model.diversity(target, rng, mode, batch=1)
    return d.squeeze(0), kl.squeeze(0)


def predict_pose_offsets(
    audio_window: WindowedFeatures,
    d_pose: torch.Tensor,
    s_pose: torch.Tensor,
    model: Audio2PoseModel,
) -> PoseOffset:
    w = torch.as_tensor(audio_window.stacked, dtype=model.dtype).unsqueeze(0)
    if w.shape[1] != model.expected_window() or w.shape[2] != model.cfg.feat_dim:
        raise ShapeMismatch(
            f"window {tuple(w.shape[1:])} does not match configured "
            f"({model.expected_window()}, {model.cfg.feat_dim})"
        )
    with torch.no_grad():
        out = model.generator(w, d_pose.unsqueeze(0), s_pose.unsqueeze(0)).squeeze(0)
    arr = out.detach().cpu().numpy().astype(np.float64)
    return PoseOffset(arr[:3], arr[3:])


def _condition_vectors(
    model: Audio2PoseModel,
    target: torch.Tensor | None,
    prev: torch.Tensor,
    rng: torch.Generator,
    mode: str,
    training: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(s_vec, d_vec, kl) honoring the ablation switches."""
    batch = prev.shape[0]
    cfg = model.cfg
    if cfg.use_stability:
        s_vec = model.stability(prev, rng, training=training and mode == "train")
    else:
        s_vec = torch.zeros((batch, cfg.stability.out_dim), dtype=model.dtype)
    if cfg.use_diversity:
        d_vec, kl = model.diversity(target, rng, mode, batch=batch)
    else:
        d_vec = torch.zeros((batch, cfg.cond_dim), dtype=model.dtype)
        kl = torch.zeros(batch, dtype=model.dtype)
    return s_vec, d_vec, kl


def pose_training_step(
    batch: dict[str, torch.Tensor],
    model: Audio2PoseModel,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    kl_scale: float = 1.0,
) -> tuple[float, float, float]:
    """One joint step on L = lambda_kl * KL + lambda_reg * L1; returns the three losses.

    kl_scale in [0, 1] implements warmup toward the full KL weight; it keeps
    the posterior from collapsing before the decoder learns to use it.
    """
    windows, target, prev = batch["windows"], batch["target"], batch["prev"]
    optimizer.zero_grad(set_to_none=True)
    s_vec, d_vec, kl = _condition_vectors(model, target, prev, rng, "train")
    pred = model.generator(windows, d_vec, s_vec)
    # 1-norm over the six offsets (batch-averaged); the sum keeps one nat of
    # latent information cheaper than the reconstruction it buys, which the
    # diversity channel needs to stay informative
    l_reg = (pred - target).abs().sum(dim=-1).mean()
    l_kl = kl.mean()
    loss = kl_scale * model.cfg.lambda_kl * l_kl + model.cfg.lambda_reg * l_reg
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"pose loss became {loss.item()!r}")
    loss.backward()
    optimizer.step()
    return float(loss.item()), float(l_kl.item()), float(l_reg.item())


def reconstruction_l1(model: Audio2PoseModel, batch: dict[str, torch.Tensor],
                      rng: torch.Generator) -> float:
    """Teacher-mode L1: posterior-mean diversity latent, eval-mode nets,
    previous-frame reference.

    This is the training-forward reconstruction error used by the overfit
    and ablation checks; inference-mode error is reported separately by the
    metrics module.
    """
    with torch.no_grad():
        s_vec, d_vec, _ = _condition_vectors(model, batch["target"], batch["prev"],
                                             rng, "reconstruct", training=False)
        pred = model.generator(batch["windows"], d_vec, s_vec)
        return float((pred - batch["target"]).abs().mean().item())


def infer_pose_offsets(
    model: Audio2PoseModel,
    windows: np.ndarray,
    mode: str,
    rng: torch.Generator,
    reference_offset: np.ndarray | None = None,
    autoregressive: bool = False,
) -> np.ndarray:
    """Predict offsets for every frame; returns (N, 6) float64.

    mode "one-shot": the stability input is the reference frame's offset
    (held fixed); mode "zero-shot": the reference is replaced by one unit
    Gaussian draw of the same dimension.  With autoregressive=True the
    previous predicted offset is fed instead.
    """
    n = windows.shape[0]
    w = torch.as_tensor(windows, dtype=model.dtype)
    if mode == "one-shot":
        if reference_offset is None:
            raise MissingTarget("one-shot inference needs a reference offset")
        ref = torch.as_tensor(np.asarray(reference_offset), dtype=model.dtype).reshape(1, POSE_DIM)
    elif mode == "zero-shot":
        ref = torch.randn((1, POSE_DIM), generator=rng, dtype=model.dtype)
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    out = np.empty((n, POSE_DIM), dtype=np.float64)
    with torch.no_grad():
        for tau in range(n):
            s_vec, d_vec, _ = _condition_vectors(model, None, ref, rng, "sample",
                                                 training=False)
            pred = model.generator(w[tau : tau + 1], d_vec, s_vec)
            out[tau] = pred.squeeze(0).cpu().numpy()
            if autoregressive:
                ref = pred.detach()
    return out


def _stats_meta(stats: PoseStats) -> dict:
    return {
        "mean": stats.mean_array().tolist(),
        "std": stats.std_array().tolist(),
        "clamp_width": stats.clamp_width,
    }


def _stats_from_meta(meta: dict) -> PoseStats:
    mean, std = np.array(meta["mean"]), np.array(meta["std"])
    return PoseStats(
        mean_euler=EulerAngles(*mean[:3]),
        mean_trans=Translation(*mean[3:]),
        std_offset_euler=std[:3],
        std_offset_trans=std[3:],
        clamp_width=float(meta["clamp_width"]),
    )


def save_audio2pose(path: Path | str, model: Audio2PoseModel) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"config": model.cfg.as_dict(), "stats": _stats_meta(model.stats)}
    checkpointio.write_container(path, checkpointio.POSE_MAGIC, tensors, meta)


def load_audio2pose(path: Path | str, dtype: torch.dtype = torch.float32) -> Audio2PoseModel:
    tensors, meta = checkpointio.read_container(path, checkpointio.POSE_MAGIC)
    model = Audio2PoseModel(Audio2PoseConfig.from_dict(meta["config"]),
                            _stats_from_meta(meta["stats"]), dtype=dtype)
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    return model
