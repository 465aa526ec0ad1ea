"""Implicit fields for upper body and head, and the ray-marching renderer.

The upper-body field hash-encodes the image-aligned XY projection of a
query point and conditions on the generated pose plus three deformable
anchor coordinates.  The head field tri-plane-encodes the full 3-D point
and fuses audio and expression streams through channel-wise sigmoid gates
computed from the encoded geometry.  Rendering integrates (color, density)
samples along stratified ray segments into pixel colors, compositing any
remaining transmittance onto a solid background color.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import checkpointio
from .errors import ShapeMismatch, SizeMismatch
from .hashenc import HashGrid2D, TriPlaneEncoder
from .nets import mlp
from .posemath import Pose, euler_to_rotation

FieldQuery = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; the canonical rig looks down +z from in front of the scene cube."""

    width: int
    height: int
    focal: float  # pixels
    pose: Pose
    t_near: float
    t_far: float
    center: tuple[float, float, float] = (0.5, 0.5, -4.5)

    def __post_init__(self):
        if self.t_near >= self.t_far:
            raise ValueError(f"t_near {self.t_near!r} must be below t_far {self.t_far!r}")
        if self.focal <= 0:
            raise ValueError("focal must be positive")

    def ray_grid(self, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Origins and unit directions for every pixel, row-major (H*W, 3)."""
        u = torch.arange(self.width, dtype=dtype) + 0.5
        v = torch.arange(self.height, dtype=dtype) + 0.5
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        d = torch.stack(
            [
                (uu - self.width / 2.0) / self.focal,
                (vv - self.height / 2.0) / self.focal,
                torch.ones_like(uu),
            ],
            dim=-1,
        ).reshape(-1, 3)
        rot = torch.as_tensor(euler_to_rotation(self.pose.euler), dtype=dtype)
        pivot = torch.tensor([0.5, 0.5, 0.5], dtype=dtype)
        center = torch.tensor(self.center, dtype=dtype)
        trans = torch.as_tensor(self.pose.trans.as_array(), dtype=dtype)
        origin = rot @ (center - pivot) + pivot + trans
        dirs = d @ rot.T
        dirs = dirs / dirs.norm(dim=-1, keepdim=True)
        origins = origin.expand(dirs.shape[0], 3).contiguous()
        return origins, dirs


def render_rays(
    origins: torch.Tensor,
    directions: torch.Tensor,
    field_query: FieldQuery,
    n_samples: int,
    t_near: float,
    t_far: float,
    background: torch.Tensor,
    rng: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """March rays through a field; returns (rgb (N,3), opacity (N,)).

    Sample positions are stratified over [t_near, t_far] (bin midpoints when
    rng is None).  Quadrature: w_i = T_i (1 - exp(-sigma_i delta_i)) with
    T_i the transmittance accumulated before segment i; leftover
    transmittance is composited onto the background color.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = origins.shape[0]
    dtype = origins.dtype
    edges = torch.linspace(t_near, t_far, n_samples + 1, dtype=dtype)
    widths = edges[1:] - edges[:-1]
    if rng is None:
        u = torch.full((n, n_samples), 0.5, dtype=dtype)
    else:
        u = torch.rand((n, n_samples), generator=rng, dtype=dtype)
    t = edges[:-1] + u * widths  # (N, S)
    delta = torch.cat([t[:, 1:] - t[:, :-1], t_far - t[:, -1:]], dim=1)
    pts = origins.unsqueeze(1) + t.unsqueeze(-1) * directions.unsqueeze(1)
    rgb, sigma = field_query(pts.reshape(-1, 3))
    rgb = rgb.reshape(n, n_samples, 3)
    sigma = sigma.reshape(n, n_samples)
    sdelta = sigma * delta
    accum = torch.cumsum(sdelta, dim=1)
    trans = torch.exp(-(accum - sdelta))  # transmittance before each segment
    weights = trans * (1.0 - torch.exp(-sdelta))
    opacity = weights.sum(dim=1)
    bg = background.to(dtype).reshape(1, 3)
    out_rgb = (weights.unsqueeze(-1) * rgb).sum(dim=1) + (1.0 - opacity).unsqueeze(-1) * bg
    return out_rgb, opacity


@dataclass(frozen=True)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    opacity: np.ndarray  # (H, W) in [0, 1]


def render_frame(
    camera: Camera,
    field_query: FieldQuery,
    n_samples: int,
    background: np.ndarray,
    rng: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    chunk: int = 1 << 17,
) -> RenderOutput:
    origins, dirs = camera.ray_grid(dtype=dtype)
    bg = torch.as_tensor(np.asarray(background), dtype=dtype)
    rgbs, ops = [], []
    with torch.no_grad():
        for start in range(0, origins.shape[0], chunk):
            r, o = render_rays(
                origins[start : start + chunk], dirs[start : start + chunk],
                field_query, n_samples, camera.t_near, camera.t_far, bg, rng=rng,
            )
            rgbs.append(r)
            ops.append(o)
    rgb = torch.cat(rgbs).reshape(camera.height, camera.width, 3)
    op = torch.cat(ops).reshape(camera.height, camera.width)
    return RenderOutput(rgb=rgb.cpu().numpy().astype(np.float64),
                        opacity=op.cpu().numpy().astype(np.float64))


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 14
    feats_per_level: int = 1
    table_size: int = 2**14
    base_res: int = 16
    max_res: int = 512
    body_hidden: tuple[int, ...] = (32, 32)
    head_hidden: tuple[int, ...] = (48, 48)
    gate_channels: int = 16
    feat_dim: int = 80  # audio feature width consumed by the head stream
    n_blendshapes: int = 7
    density_scale: float = 100.0
    head_pivot: tuple[float, float] = (0.5, 0.4)
    # per-axis scale applied to pose conditioning so inputs are O(1)
    pose_scale: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "FieldConfig":
        d = dict(d)
        for key in ("body_hidden", "head_hidden", "head_pivot", "pose_scale"):
            d[key] = tuple(d[key])
        return FieldConfig(**d)


def _pose_tensor(pose: Pose, cfg: FieldConfig, dtype: torch.dtype) -> torch.Tensor:
    raw = torch.as_tensor(pose.as_array(), dtype=dtype)
    scale = torch.as_tensor(cfg.pose_scale, dtype=dtype)
    return raw * scale


class UpperBodyField(nn.Module):
    def __init__(self, cfg: FieldConfig, dtype: torch.dtype = torch.float32,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.grid = HashGrid2D(cfg.levels, cfg.feats_per_level, cfg.table_size,
                               cfg.base_res, cfg.max_res, dtype=dtype, generator=generator)
        # head anchor plus two shoulder anchors, deformed by the pose
        self.anchors = nn.Parameter(
            torch.tensor([[0.5, 0.4], [0.3, 0.8], [0.7, 0.8]], dtype=dtype)
        )
        in_dim = self.grid.out_dim + 6 + 6
        self.net = mlp([in_dim, *cfg.body_hidden, 4], activation="relu", dtype=dtype)

    def deformed_anchors(self, pose: Pose, dtype: torch.dtype) -> torch.Tensor:
        """Rotate anchors by alpha about the head pivot, then add (x, y) of t."""
        ca, sa = np.cos(pose.euler.alpha), np.sin(pose.euler.alpha)
        rot = torch.tensor([[ca, -sa], [sa, ca]], dtype=dtype)
        pivot = torch.tensor(self.cfg.head_pivot, dtype=dtype)
        txy = torch.tensor([pose.trans.x, pose.trans.y], dtype=dtype)
        return (self.anchors - pivot) @ rot.T + pivot + txy

    def query(self, x: torch.Tensor, pose: Pose) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = self.anchors.dtype
        enc = self.grid(x[:, :2])  # image-aligned XY projection
        cond = torch.cat([_pose_tensor(pose, self.cfg, dtype),
                          self.deformed_anchors(pose, dtype).reshape(-1)])
        out = self.net(torch.cat([enc, cond.expand(x.shape[0], -1)], dim=1))
        rgb = torch.sigmoid(out[:, :3])
        sigma = torch.nn.functional.softplus(out[:, 3]) * self.cfg.density_scale
        return rgb, sigma


class HeadField(nn.Module):
    def __init__(self, cfg: FieldConfig, dtype: torch.dtype = torch.float32,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = TriPlaneEncoder(
            levels=cfg.levels, feats_per_level=cfg.feats_per_level,
            table_size=cfg.table_size, base_res=cfg.base_res, max_res=cfg.max_res,
            dtype=dtype, generator=generator,
        )
        c = cfg.gate_channels
        enc_dim = self.encoder.out_dim
        self.attn_aud = nn.Linear(enc_dim, c, dtype=dtype)
        self.attn_exp = nn.Linear(enc_dim, c, dtype=dtype)
        self.a_proj = nn.Linear(cfg.feat_dim, c, dtype=dtype)
        self.b_proj = nn.Linear(cfg.n_blendshapes, c, dtype=dtype)
        in_dim = enc_dim + 6 + 2 * c
        self.net = mlp([in_dim, *cfg.head_hidden, 4], activation="relu", dtype=dtype)

    def query(
        self,
        x: torch.Tensor,
        pose: Pose,
        b_aud: np.ndarray | torch.Tensor,
        a_h: np.ndarray | torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = self.attn_aud.weight.dtype
        b = torch.as_tensor(np.asarray(b_aud), dtype=dtype).reshape(-1)
        a = torch.as_tensor(np.asarray(a_h), dtype=dtype).reshape(-1)
        if b.shape[0] != self.cfg.n_blendshapes:
            raise ShapeMismatch(f"expected {self.cfg.n_blendshapes} blendshapes, got {b.shape[0]}")
        if a.shape[0] != self.cfg.feat_dim:
            raise ShapeMismatch(f"expected audio feature width {self.cfg.feat_dim}, got {a.shape[0]}")
        g = self.encoder(x)
        v_aud = torch.sigmoid(self.attn_aud(g))
        v_exp = torch.sigmoid(self.attn_exp(g))
        aud_stream = self.a_proj(a).unsqueeze(0) * v_aud
        exp_stream = self.b_proj(b).unsqueeze(0) * v_exp
        pose_cond = _pose_tensor(pose, self.cfg, dtype).expand(x.shape[0], -1)
        out = self.net(torch.cat([g, pose_cond, aud_stream, exp_stream], dim=1))
        rgb = torch.sigmoid(out[:, :3])
        sigma = torch.nn.functional.softplus(out[:, 3]) * self.cfg.density_scale
        return rgb, sigma


def query_upper_body_field(x: torch.Tensor, pose: Pose, field: UpperBodyField):
    return field.query(x, pose)


def query_head_field(x: torch.Tensor, pose: Pose, b_aud, a_h, field: HeadField):
    return field.query(x, pose, b_aud, a_h)


def composite_frame(body: RenderOutput, head: RenderOutput, head_region: np.ndarray) -> np.ndarray:
    """Alpha-blend the head render over the body render inside head_region."""
    if body.rgb.shape != head.rgb.shape or body.rgb.shape[:2] != head_region.shape:
        raise SizeMismatch(
            f"body {body.rgb.shape}, head {head.rgb.shape}, mask {head_region.shape}"
        )
    out = body.rgb.copy()
    m = head_region.astype(bool)
    alpha = head.opacity[m][:, None]
    out[m] = alpha * head.rgb[m] + (1.0 - alpha) * body.rgb[m]
    return out


def photometric_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixel/channel entries."""
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    return (pred - truth.to(pred.dtype)).square().mean()


def _gradient_magnitude(img: torch.Tensor) -> torch.Tensor:
    # img (h, w, 3) -> (h-1, w-1, 3); smooth sqrt keeps this differentiable
    dx = img[1:, :, :] - img[:-1, :, :]
    dy = img[:, 1:, :] - img[:, :-1, :]
    return torch.sqrt(dx[:, :-1, :].square() + dy[:-1, :, :].square() + 1e-12)


def _downsample2(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    if x.ndim == 3:
        return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


OUTSIDE_MASK_WEIGHT = 0.1


def perceptual_proxy(
    pred_patch: torch.Tensor, truth_patch: torch.Tensor, lip_mask: torch.Tensor,
    n_scales: int = 3,
) -> torch.Tensor:
    """Multi-scale L1 between gradient-magnitude maps, weighted toward the lip mask."""
    p, t, m = pred_patch, truth_patch.to(pred_patch.dtype), lip_mask.to(pred_patch.dtype)
    terms = []
    for _ in range(n_scales):
        gp, gt = _gradient_magnitude(p), _gradient_magnitude(t)
        w = (m + OUTSIDE_MASK_WEIGHT * (1.0 - m))[: gp.shape[0], : gp.shape[1]]
        w = w.unsqueeze(-1).expand_as(gp)
        terms.append((w * (gp - gt).abs()).sum() / w.sum())
        p, t, m = _downsample2(p), _downsample2(t), _downsample2(m)
    return torch.stack(terms).mean()


def lip_patch_loss(
    pred_patch: torch.Tensor,
    truth_patch: torch.Tensor,
    lip_mask: torch.Tensor,
    lambda_lip: float = 0.01,
) -> torch.Tensor:
    """Photometric term plus lambda-weighted perceptual proxy on the patch."""
    pred_patch = torch.as_tensor(pred_patch)
    truth_patch = torch.as_tensor(truth_patch)
    lip_mask = torch.as_tensor(np.asarray(lip_mask))
    if pred_patch.shape != truth_patch.shape or pred_patch.shape[:2] != lip_mask.shape:
        raise ShapeMismatch("patch/mask shapes disagree")
    base = photometric_loss(pred_patch, truth_patch)
    if lambda_lip == 0.0:
        return base
    return base + lambda_lip * perceptual_proxy(pred_patch, truth_patch, lip_mask)


def save_fields(path: Path | str, body: UpperBodyField, head: HeadField) -> None:
    tensors = {}
    for prefix, module in (("body", body), ("head", head)):
        for k, v in module.state_dict().items():
            tensors[f"{prefix}.{k}"] = v.detach().cpu().numpy()
    meta = {"config": body.cfg.as_dict()}
    checkpointio.write_container(path, checkpointio.FIELD_MAGIC, tensors, meta)


def load_fields(path: Path | str, dtype: torch.dtype = torch.float32) -> tuple[UpperBodyField, HeadField]:
    tensors, meta = checkpointio.read_container(path, checkpointio.FIELD_MAGIC)
    cfg = FieldConfig.from_dict(meta["config"])
    body = UpperBodyField(cfg, dtype=dtype)
    head = HeadField(cfg, dtype=dtype)
    body.load_state_dict({k[5:]: torch.as_tensor(v, dtype=dtype)
                          for k, v in tensors.items() if k.startswith("body.")})
    head.load_state_dict({k[5:]: torch.as_tensor(v, dtype=dtype)
                          for k, v in tensors.items() if k.startswith("head.")})
    return body, head
