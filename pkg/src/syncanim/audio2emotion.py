"""Audio-to-expression generator for upper-face blendshape offsets.

Same fusion pattern as the pose generator, but the diversity vector comes
from a conditional VAE whose condition is a periodic time encoding plus a
convolutional summary of the neighboring audio frames; blinking is
periodic and weakly audio-correlated, so timing information has to enter
through the condition.  The stability vector is built from the current
frame's offset during training (reference frame or noise at inference).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpointio
from .audiofeat import TimeEncoding, WindowedFeatures
from .errors import MissingTarget, NonFiniteLoss, ShapeMismatch
from .nets import ConvStack, DropoutMLP, TemporalUNet, mlp, seeded_noise
from .audio2pose import StabilityConfig, gaussian_kl
from .posemath import STD_FLOOR

DEFAULT_BLENDSHAPE_NAMES = (
    "blink_left",
    "blink_right",
    "brow_raise_left",
    "brow_raise_right",
    "brow_down_left",
    "brow_down_right",
    "brow_inner_up",
)
DEFAULT_N_BLENDSHAPES = len(DEFAULT_BLENDSHAPE_NAMES)


@dataclass(frozen=True)
class BlendshapeVector:
    b: np.ndarray  # (B,) each in [0, 1]

    def __post_init__(self):
        arr = np.asarray(self.b, dtype=np.float64)
        object.__setattr__(self, "b", arr)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("blendshape components must lie in [0, 1]")


@dataclass(frozen=True)
class BlendshapeOffset:
    off_b: np.ndarray  # (B,) z-score units


@dataclass(frozen=True)
class ExpressionStats:
    mean_b: np.ndarray
    std_b: np.ndarray  # floored at STD_FLOOR
    clamp_width: float = 3.0


def compute_expression_stats(tracks: np.ndarray, clamp_width: float = 3.0) -> ExpressionStats:
    """Means and population stds over a (N, B) blendshape track."""
    arr = np.asarray(tracks, dtype=np.float64)
    return ExpressionStats(
        mean_b=arr.mean(axis=0),
        std_b=np.maximum(arr.std(axis=0), STD_FLOOR),
        clamp_width=float(clamp_width),
    )


def normalize_blendshape(b: BlendshapeVector, stats: ExpressionStats) -> BlendshapeOffset:
    off = (b.b - stats.mean_b) / stats.std_b
    return BlendshapeOffset(np.clip(off, -stats.clamp_width, stats.clamp_width))


def denormalize_blendshape(off: BlendshapeOffset, stats: ExpressionStats) -> BlendshapeVector:
    """Inverse z-transform, clipped into [0, 1] to restore a valid coefficient vector."""
    return BlendshapeVector(np.clip(stats.mean_b + off.off_b * stats.std_b, 0.0, 1.0))


@dataclass(frozen=True)
class Audio2EmotionConfig:
    n_blendshapes: int = DEFAULT_N_BLENDSHAPES
    feat_dim: int = 80
    window: int = 4
    time_dim: int = 8  # 2K entries from the sinusoidal encoding
    latent_dim: int = 8
    cond_dim: int = 32
    time_feat_dim: int = 16
    audio_feat_dim: int = 16
    conv_width: int = 32
    unet_channels: tuple[int, ...] = (32, 48, 64)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    clamp_width: float = 3.0
    lambda_kl: float = 0.1
    lambda_reg: float = 1.0
    # ablation switches: a disabled conditional vector is replaced by zeros
    use_stability: bool = True
    use_diversity: bool = True

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Audio2EmotionConfig":
        d = dict(d)
        d["stability"] = StabilityConfig(**{
            k: tuple(v) if k == "hidden_dims" else v for k, v in d["stability"].items()
        })
        d["unet_channels"] = tuple(d["unet_channels"])
        return Audio2EmotionConfig(**d)


class ExpressionCVAE(nn.Module):
    """CVAE over expression offsets conditioned on time and audio context."""

    def __init__(self, cfg: Audio2EmotionConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        self.time_mlp = mlp([cfg.time_dim, 32, cfg.time_feat_dim], dtype=dtype)
        self.audio_conv = ConvStack(cfg.feat_dim, cfg.audio_feat_dim, width=cfg.conv_width,
                                    n_layers=3, kernel=3, dtype=dtype)
        c = cfg.time_feat_dim + cfg.audio_feat_dim
        self.encoder = mlp([cfg.n_blendshapes + c, 64, 2 * cfg.latent_dim], dtype=dtype)
        self.decoder = mlp([cfg.latent_dim + c, 64, cfg.cond_dim], dtype=dtype)

    def condition(self, t_enc: torch.Tensor, a_seq: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.time_mlp(t_enc), self.audio_conv(a_seq)], dim=-1)

    def forward(
        self,
        target: torch.Tensor | None,
        t_enc: torch.Tensor,
        a_seq: torch.Tensor,
        rng: torch.Generator,
        mode: str,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = self.time_mlp[0].weight.dtype
        cond = self.condition(t_enc, a_seq)
        batch = cond.shape[0]
        if mode in ("train", "reconstruct"):
            if target is None:
                raise MissingTarget("train mode requires the ground-truth expression offsets")
            stats = self.encoder(torch.cat([target, cond], dim=-1))
            mu, log_var = stats[..., : self.latent_dim], stats[..., self.latent_dim :]
            if mode == "train":
                eps = torch.randn(mu.shape, generator=rng, dtype=dtype)
                z = mu + eps * torch.exp(0.5 * log_var)
            else:
                z = mu
            return self.decoder(torch.cat([z, cond], dim=-1)), gaussian_kl(mu, log_var)
        if mode == "sample":
            z = torch.randn((batch, self.latent_dim), generator=rng, dtype=dtype)
            return self.decoder(torch.cat([z, cond], dim=-1)), torch.zeros(batch, dtype=dtype)
        raise ValueError(f"unknown mode {mode!r}")


class ExpressionStabilityNet(nn.Module):
    """MLP over the current frame's offset; noise/dropout only while training."""

    def __init__(self, cfg: Audio2EmotionConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg.stability
        self.net = DropoutMLP([cfg.n_blendshapes, *cfg.stability.hidden_dims, cfg.stability.out_dim],
                              cfg.stability.dropout_rate, dtype=dtype)

    def forward(self, ref: torch.Tensor, rng: torch.Generator, training: bool) -> torch.Tensor:
        if training and self.cfg.noise_std > 0:
            ref = ref + seeded_noise(tuple(ref.shape), self.cfg.noise_mean,
                                     self.cfg.noise_std, rng, ref.dtype)
        return self.net(ref, rng, training)


class ExpressionGenerator(nn.Module):
    def __init__(self, cfg: Audio2EmotionConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.clamp_width = cfg.clamp_width
        cond = cfg.cond_dim + cfg.stability.out_dim
        self.unet = TemporalUNet(cfg.feat_dim, cond, cfg.unet_channels, dtype=dtype)
        self.head_b = mlp([self.unet.out_dim, 32, cfg.n_blendshapes], dtype=dtype)

    def forward(self, windows: torch.Tensor, d_vec: torch.Tensor, s_vec: torch.Tensor) -> torch.Tensor:
        shared = self.unet(windows, torch.cat([d_vec, s_vec], dim=-1))
        return torch.tanh(self.head_b(shared)) * self.clamp_width


class Audio2EmotionModel(nn.Module):
    def __init__(self, cfg: Audio2EmotionConfig, stats: ExpressionStats,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.stats = stats
        self.dtype = dtype
        self.stability = ExpressionStabilityNet(cfg, dtype=dtype)
        self.cvae = ExpressionCVAE(cfg, dtype=dtype)
        self.generator = ExpressionGenerator(cfg, dtype=dtype)

    def expected_window(self) -> int:
        return 2 * self.cfg.window + 1


def make_stability_vector_exp(
    current_offset: BlendshapeOffset, model: Audio2EmotionModel,
    rng: torch.Generator, training: bool
) -> torch.Tensor:
    ref = torch.as_tensor(np.asarray(current_offset.off_b), dtype=model.dtype).unsqueeze(0)
    return model.stability(ref, rng, training).squeeze(0)


def make_diversity_vector_exp(
    target_offset: np.ndarray | None,
    t_enc: TimeEncoding,
    a_seq: WindowedFeatures,
    model: Audio2EmotionModel,
    rng: torch.Generator,
    mode: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    target = None
    if target_offset is not None:
        target = torch.as_tensor(np.asarray(target_offset), dtype=model.dtype).reshape(1, -1)
    t = torch.as_tensor(t_enc.vec, dtype=model.dtype).unsqueeze(0)
    a = torch.as_tensor(a_seq.stacked, dtype=model.dtype).unsqueeze(0)
    d, kl = model.cvae(target, t, a, rng, mode)
    return d.squeeze(0), kl.squeeze(0)


def predict_expression_offsets(
    audio_window: WindowedFeatures,
    d_exp: torch.Tensor,
    s_exp: torch.Tensor,
    model: Audio2EmotionModel,
) -> BlendshapeOffset:
    w = torch.as_tensor(audio_window.stacked, dtype=model.dtype).unsqueeze(0)
    if w.shape[1] != model.expected_window() or w.shape[2] != model.cfg.feat_dim:
        raise ShapeMismatch(
            f"window {tuple(w.shape[1:])} does not match configured "
            f"({model.expected_window()}, {model.cfg.feat_dim})"
        )
    with torch.no_grad():
        out = model.generator(w, d_exp.unsqueeze(0), s_exp.unsqueeze(0)).squeeze(0)
    return BlendshapeOffset(out.detach().cpu().numpy().astype(np.float64))


def _condition_vectors_exp(
    model: Audio2EmotionModel,
    target: torch.Tensor | None,
    ref: torch.Tensor,
    t_enc: torch.Tensor,
    windows: torch.Tensor,
    rng: torch.Generator,
    mode: str,
    training: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(s_vec, d_vec, kl) honoring the ablation switches."""
    batch = ref.shape[0]
    cfg = model.cfg
    if cfg.use_stability:
        s_vec = model.stability(ref, rng, training=training and mode == "train")
    else:
        s_vec = torch.zeros((batch, cfg.stability.out_dim), dtype=model.dtype)
    if cfg.use_diversity:
        d_vec, kl = model.cvae(target, t_enc, windows, rng, mode)
    else:
        d_vec = torch.zeros((batch, cfg.cond_dim), dtype=model.dtype)
        kl = torch.zeros(batch, dtype=model.dtype)
    return s_vec, d_vec, kl


def expression_training_step(
    batch: dict[str, torch.Tensor],
    model: Audio2EmotionModel,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    kl_scale: float = 1.0,
) -> tuple[float, float, float]:
    windows, target = batch["windows"], batch["target"]
    optimizer.zero_grad(set_to_none=True)
    # current-frame reference for stability, per the training formulation
    s_vec, d_vec, kl = _condition_vectors_exp(model, target, target, batch["t_enc"],
                                              windows, rng, "train")
    pred = model.generator(windows, d_vec, s_vec)
    # 1-norm over the blendshape offsets, batch-averaged (same convention as
    # the pose loss)
    l_reg = (pred - target).abs().sum(dim=-1).mean()
    l_kl = kl.mean()
    loss = kl_scale * model.cfg.lambda_kl * l_kl + model.cfg.lambda_reg * l_reg
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"expression loss became {loss.item()!r}")
    loss.backward()
    optimizer.step()
    return float(loss.item()), float(l_kl.item()), float(l_reg.item())


def reconstruction_l1_exp(model: Audio2EmotionModel, batch: dict[str, torch.Tensor],
                          rng: torch.Generator) -> float:
    """Teacher-mode L1 with posterior latent; see audio2pose.reconstruction_l1."""
    with torch.no_grad():
        s_vec, d_vec, _ = _condition_vectors_exp(
            model, batch["target"], batch["target"], batch["t_enc"], batch["windows"],
            rng, "reconstruct", training=False)
        pred = model.generator(batch["windows"], d_vec, s_vec)
        return float((pred - batch["target"]).abs().mean().item())


def infer_expression_offsets(
    model: Audio2EmotionModel,
    windows: np.ndarray,
    t_encs: np.ndarray,
    mode: str,
    rng: torch.Generator,
    reference_offset: np.ndarray | None = None,
) -> np.ndarray:
    """Predict offsets for every frame; (N, B) float64.

    one-shot holds the reference frame's offset in the stability input;
    zero-shot replaces it with one unit Gaussian draw.
    """
    n = windows.shape[0]
    b_dim = model.cfg.n_blendshapes
    w = torch.as_tensor(windows, dtype=model.dtype)
    t = torch.as_tensor(t_encs, dtype=model.dtype)
    if mode == "one-shot":
        if reference_offset is None:
            raise MissingTarget("one-shot inference needs a reference offset")
        ref = torch.as_tensor(np.asarray(reference_offset), dtype=model.dtype).reshape(1, b_dim)
    elif mode == "zero-shot":
        ref = torch.randn((1, b_dim), generator=rng, dtype=model.dtype)
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    out = np.empty((n, b_dim), dtype=np.float64)
    with torch.no_grad():
        for tau in range(n):
            s_vec, d_vec, _ = _condition_vectors_exp(
                model, None, ref, t[tau : tau + 1], w[tau : tau + 1], rng, "sample",
                training=False)
            pred = model.generator(w[tau : tau + 1], d_vec, s_vec)
            out[tau] = pred.squeeze(0).cpu().numpy()
    return out


BLENDSHAPE_CSV_PREFIX = "frame"


def write_blendshape_track(path: Path | str, track: np.ndarray) -> None:
    """CSV ``frame,bs_0,...,bs_{B-1}``, one row per frame."""
    track = np.asarray(track)
    header = ",".join([BLENDSHAPE_CSV_PREFIX] + [f"bs_{i}" for i in range(track.shape[1])])
    lines = [header]
    for i, row in enumerate(track):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_blendshape_track(path: Path | str) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith(BLENDSHAPE_CSV_PREFIX + ","):
        raise ValueError(f"{path}: missing blendshape CSV header")
    n_cols = len(lines[0].split(",")) - 1
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != n_cols + 1:
            raise ValueError(f"{path}: bad row {line!r}")
        rows.append([float(v) for v in parts[1:]])
    return np.array(rows, dtype=np.float64)


def save_audio2emotion(path: Path | str, model: Audio2EmotionModel) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "config": model.cfg.as_dict(),
        "stats": {
            "mean": model.stats.mean_b.tolist(),
            "std": model.stats.std_b.tolist(),
            "clamp_width": model.stats.clamp_width,
        },
    }
    checkpointio.write_container(path, checkpointio.EXPRESSION_MAGIC, tensors, meta)


def load_audio2emotion(path: Path | str, dtype: torch.dtype = torch.float32) -> Audio2EmotionModel:
    tensors, meta = checkpointio.read_container(path, checkpointio.EXPRESSION_MAGIC)
    stats = ExpressionStats(
        mean_b=np.array(meta["stats"]["mean"]),
        std_b=np.array(meta["stats"]["std"]),
        clamp_width=float(meta["stats"]["clamp_width"]),
    )
    model = Audio2EmotionModel(Audio2EmotionConfig.from_dict(meta["config"]), stats, dtype=dtype)
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    return model
