"""Small network building blocks shared by the pose and expression generators.

All stochastic pieces (dropout, injected noise, latent sampling) draw from
an explicit torch.Generator so training runs are reproducible in
single-thread mode.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch

_ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "softplus": nn.Softplus}


def seeded_dropout(x: torch.Tensor, p: float, rng: torch.Generator, training: bool) -> torch.Tensor:
    """Inverted dropout with an explicit generator; identity in eval mode."""
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def seeded_noise(
    shape: tuple[int, ...], mean: float, std: float, rng: torch.Generator, dtype: torch.dtype
) -> torch.Tensor:
    return mean + std * torch.randn(shape, generator=rng, dtype=dtype)


def mlp(dims: Sequence[int], activation: str = "tanh", dtype: torch.dtype = torch.float32) -> nn.Sequential:
    """Plain fully connected stack; no activation after the last layer."""
    act = _ACTIVATIONS[activation]
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1], dtype=dtype))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class DropoutMLP(nn.Module):
    """MLP whose input and hidden activations get seeded dropout during training."""

    def __init__(
        self,
        dims: Sequence[int],
        dropout_rate: float,
        activation: str = "tanh",
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dropout_rate = float(dropout_rate)
        self.linears = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)
        )
        self.act = _ACTIVATIONS[activation]()

    def forward(self, x: torch.Tensor, rng: torch.Generator, training: bool) -> torch.Tensor:
        x = seeded_dropout(x, self.dropout_rate, rng, training)
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i < len(self.linears) - 1:
                x = self.act(x)
                x = seeded_dropout(x, self.dropout_rate, rng, training)
        return x


class ConvStack(nn.Module):
    """Stacked 1-D convolutions over the window axis, mean-pooled to a vector."""

    def __init__(
        self,
        in_channels: int,
        out_dim: int,
        width: int = 32,
        n_layers: int = 3,
        kernel: int = 3,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        convs = []
        ch = in_channels
        for _ in range(n_layers):
            convs.append(nn.Conv1d(ch, width, kernel, stride=1, padding=kernel // 2, dtype=dtype))
            ch = width
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Linear(width, out_dim, dtype=dtype)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        # windows: (B, W, F_a) -> conv over W with F_a channels
        x = windows.transpose(1, 2)
        for conv in self.convs:
            x = torch.tanh(conv(x))
        return self.proj(x.mean(dim=2))


class TemporalUNet(nn.Module):
    """1-D multiscale encoder-decoder over the audio window with bottleneck conditioning.

    The conditioning vector is broadcast along the (downsampled) window axis
    and concatenated into the bottleneck channels; skip connections restore
    per-frame detail on the way up.  Output is the decoder feature map
    mean-pooled to one shared vector.
    """

    def __init__(
        self,
        in_channels: int,
        cond_dim: int,
        channels: Sequence[int] = (32, 48, 64),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("TemporalUNet needs at least two channel levels")
        self.channels = tuple(channels)
        c = channels
        self.enc_in = nn.Conv1d(in_channels, c[0], 3, padding=1, dtype=dtype)
        self.downs = nn.ModuleList(
            nn.Conv1d(c[i], c[i + 1], 3, stride=2, padding=1, dtype=dtype)
            for i in range(len(c) - 1)
        )
        self.bottleneck = nn.Conv1d(c[-1] + cond_dim, c[-1], 1, dtype=dtype)
        self.ups = nn.ModuleList(
            nn.Conv1d(c[i + 1] + c[i], c[i], 3, padding=1, dtype=dtype)
            for i in reversed(range(len(c) - 1))
        )
        self.out_dim = c[0]

    def forward(self, windows: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # windows: (B, W, F_a); cond: (B, cond_dim) -> shared feature (B, out_dim)
        if windows.ndim != 3:
            raise ShapeMismatch(f"expected (B, W, F) windows, got {tuple(windows.shape)}")
        if cond.shape[0] != windows.shape[0]:
            raise ShapeMismatch("conditioning batch size differs from audio batch size")
        x = torch.tanh(self.enc_in(windows.transpose(1, 2)))
        skips = [x]
        for down in self.downs:
            x = torch.tanh(down(x))
            skips.append(x)
        x = skips.pop()  # deepest level feeds the bottleneck directly
        cexp = cond.unsqueeze(-1).expand(-1, -1, x.shape[-1])
        x = torch.tanh(self.bottleneck(torch.cat([x, cexp], dim=1)))
        for up in self.ups:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-1], mode="nearest")
            x = torch.tanh(up(torch.cat([x, skip], dim=1)))
        return x.mean(dim=2)
