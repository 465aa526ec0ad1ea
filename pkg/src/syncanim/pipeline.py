"""End-to-end inference (one-shot / zero-shot), evaluation reports, benchmark.

Inference consumes a feature track, predicts pose and blendshape offsets
per frame, denormalizes them through the checkpoint statistics, and
renders frames by compositing the head field over the upper-body field.
Evaluation compares an inference output directory against a dataset
bundle's eval split and writes a delimited report plus figures.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .audiofeat import (
    FeatureTrack,
    SyntheticFeatureProvider,
    encode_time_matrix,
    window_matrix,
)
from .audio2emotion import (
    Audio2EmotionModel,
    BlendshapeOffset,
    BlendshapeVector,
    denormalize_blendshape,
    infer_expression_offsets,
    load_audio2emotion,
    write_blendshape_track,
)
from .audio2pose import (
    Audio2PoseModel,
    infer_pose_offsets,
    load_audio2pose,
)
from .dataset import DatasetBundle
from .errors import ConfigInvalid, MissingFile
from .fields import Camera, HeadField, RenderOutput, UpperBodyField, composite_frame, load_fields
from .posemath import (
    EulerAngles,
    Pose,
    PoseOffset,
    Translation,
    denormalize_pose_offset,
    normalize_pose_offset,
    write_pose_track,
)


@dataclass
class InferenceModels:
    a2p: Audio2PoseModel
    a2e: Audio2EmotionModel
    body: UpperBodyField
    head: HeadField
    render_meta: dict


def load_models(ckpt_dir: Path | str) -> InferenceModels:
    ckpt = Path(ckpt_dir)
    for name in ("audio2pose.ckpt", "audio2emotion.ckpt", "fields.ckpt", "render_meta.json"):
        if not (ckpt / name).exists():
            raise MissingFile(f"checkpoint file {ckpt / name} missing")
    body, head = load_fields(ckpt / "fields.ckpt")
    return InferenceModels(
        a2p=load_audio2pose(ckpt / "audio2pose.ckpt"),
        a2e=load_audio2emotion(ckpt / "audio2emotion.ckpt"),
        body=body,
        head=head,
        render_meta=json.loads((ckpt / "render_meta.json").read_text()),
    )


def camera_from_meta(meta: dict) -> Camera:
    return Camera(
        width=int(meta["resolution"]), height=int(meta["resolution"]),
        focal=float(meta["focal"]),
        pose=Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0)),
        t_near=float(meta["t_near"]), t_far=float(meta["t_far"]),
        center=tuple(meta["camera_center"]),
    )


def head_mask_from_meta(meta: dict) -> np.ndarray:
    res = int(meta["resolution"])
    x0, y0, x1, y1 = meta["head_region"]
    mask = np.zeros((res, res), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


@dataclass
class InferenceResult:
    pose_offsets: np.ndarray  # (N, 6)
    exp_offsets: np.ndarray  # (N, B)
    poses: list
    blendshapes: np.ndarray  # (N, B) in [0, 1]
    frames: np.ndarray | None  # (N, H, W, 3)


def predict_tracks(
    models: InferenceModels,
    features: FeatureTrack,
    mode: str,
    seed: int,
    tau_offset: int = 0,
    reference_pose_offset: np.ndarray | None = None,
    reference_exp_offset: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame pose and expression offsets for a feature track."""
    windows = window_matrix(features, n=models.a2p.cfg.window)
    n = len(features)
    t_encs = encode_time_matrix(tau_offset + n, fps=features.fps)[tau_offset:]
    rng = torch.Generator().manual_seed(seed)
    pose_off = infer_pose_offsets(models.a2p, windows, mode, rng,
                                  reference_offset=reference_pose_offset)
    exp_off = infer_expression_offsets(models.a2e, windows, t_encs, mode, rng,
                                       reference_offset=reference_exp_offset)
    return pose_off, exp_off


def render_parameter_frames(
    models: InferenceModels,
    poses: list,
    blendshapes: np.ndarray,
    feats: np.ndarray,
    progress: bool = False,
) -> np.ndarray:
    """Composite body+head renders for per-frame parameters (deterministic sampling)."""
    meta = models.render_meta
    camera = camera_from_meta(meta)
    mask = head_mask_from_meta(meta)
    n_samples = int(meta["n_samples"])
    background = np.asarray(meta["background"])
    bg_t = torch.as_tensor(background, dtype=torch.float32)
    origins, dirs = camera.ray_grid()
    region = torch.nonzero(torch.as_tensor(mask.reshape(-1)), as_tuple=False).squeeze(1)
    h = w = camera.height
    out = np.empty((len(poses), h, w, 3))
    from .fields import render_rays  # local import keeps module load light

    with torch.no_grad():
        for i, pose in enumerate(poses):
            body_rgb, body_op = render_rays(
                origins, dirs, lambda p: models.body.query(p, pose),
                n_samples, camera.t_near, camera.t_far, bg_t,
            )
            head_rgb = torch.zeros_like(body_rgb)
            head_op = torch.zeros(h * w)
            hr, ho = render_rays(
                origins[region], dirs[region],
                lambda p: models.head.query(p, pose, blendshapes[i], feats[i]),
                n_samples, camera.t_near, camera.t_far, bg_t,
            )
            head_rgb[region] = hr
            head_op[region] = ho
            body = RenderOutput(rgb=body_rgb.numpy().reshape(h, w, 3).astype(np.float64),
                                opacity=body_op.numpy().reshape(h, w).astype(np.float64))
            head = RenderOutput(rgb=head_rgb.numpy().reshape(h, w, 3).astype(np.float64),
                                opacity=head_op.numpy().reshape(h, w).astype(np.float64))
            out[i] = np.clip(composite_frame(body, head, mask), 0.0, 1.0)
    return out


def run_inference(
    models: InferenceModels,
    features: FeatureTrack,
    mode: str,
    seed: int,
    tau_offset: int = 0,
    reference_pose_offset: np.ndarray | None = None,
    reference_exp_offset: np.ndarray | None = None,
    render: bool = True,
    out_dir: Path | str | None = None,
) -> InferenceResult:
    pose_off, exp_off = predict_tracks(
        models, features, mode, seed, tau_offset,
        reference_pose_offset, reference_exp_offset,
    )
    pose_stats = models.a2p.stats
    exp_stats = models.a2e.stats
    poses = [denormalize_pose_offset(PoseOffset.from_array(row), pose_stats) for row in pose_off]
    blends = np.stack(
        [denormalize_blendshape(BlendshapeOffset(row), exp_stats).b for row in exp_off]
    )
    frames = None
    if render:
        frames = render_parameter_frames(models, poses, blends, features.frames)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pose_track(out / "pose.csv", poses)
        write_blendshape_track(out / "blendshapes.csv", blends)
        if frames is not None:
            (out / "frames").mkdir(exist_ok=True)
            for i in range(frames.shape[0]):
                arr = np.round(frames[i] * 255.0).astype(np.uint8)
                Image.fromarray(arr, "RGB").save(out / "frames" / f"{i:06d}.png")
    return InferenceResult(pose_offsets=pose_off, exp_offsets=exp_off, poses=poses,
                           blendshapes=blends, frames=frames)


def eval_references(bundle: DatasetBundle, split: str = "eval") -> tuple[np.ndarray, np.ndarray]:
    """Offsets of the split's first frame, used as the one-shot reference."""
    idx = bundle.n_train if split == "eval" else 0
    pose_ref = normalize_pose_offset(bundle.poses[idx], bundle.pose_stats).as_array()
    exp_ref = np.clip(
        (bundle.blendshapes[idx] - bundle.exp_stats.mean_b) / bundle.exp_stats.std_b,
        -bundle.exp_stats.clamp_width, bundle.exp_stats.clamp_width,
    )
    return pose_ref, exp_ref


def eval_feature_track(bundle: DatasetBundle) -> FeatureTrack:
    sl = bundle.eval_slice()
    return FeatureTrack(frames=bundle.features.frames[sl].copy(), fps=bundle.features.fps)


def throughput_bench(
    models: InferenceModels,
    n_frames: int,
    resolution: int | None = None,
    seed: int = 0,
) -> dict:
    """Wall-clock frames/second of the full inference path, with per-stage timing.

    No throughput target is asserted anywhere; the report is informational.
    """
    if n_frames < 1:
        raise ConfigInvalid("bench needs n_frames >= 1")
    meta = dict(models.render_meta)
    if resolution is not None and resolution != int(meta["resolution"]):
        scale = resolution / int(meta["resolution"])
        meta["resolution"] = resolution
        meta["focal"] = float(meta["focal"]) * scale
        meta["head_region"] = [int(round(v * scale)) for v in meta["head_region"]]
        models = InferenceModels(models.a2p, models.a2e, models.body, models.head, meta)
    provider = SyntheticFeatureProvider(n_mels=models.a2p.cfg.feat_dim, fps=float(meta["fps"]))

    def make_features(count):
        t = np.arange(count) / float(meta["fps"])
        env = 0.5 + 0.4 * np.sin(2 * math.pi * 1.7 * t)
        return provider.from_envelope(env, seed=seed)

    # warmup (excluded from timing)
    warm = make_features(1)
    res_warm = run_inference(models, warm, "zero-shot", seed, render=True)
    assert res_warm.frames is not None

    stage_s = {"features": 0.0, "pose": 0.0, "expression": 0.0, "render": 0.0}
    t_total0 = time.perf_counter()

    t0 = time.perf_counter()
    features = make_features(n_frames)
    windows = window_matrix(features, n=models.a2p.cfg.window)
    t_encs = encode_time_matrix(n_frames, fps=features.fps)
    stage_s["features"] = time.perf_counter() - t0

    rng = torch.Generator().manual_seed(seed)
    from .audio2pose import infer_pose_offsets as _ipo
    from .audio2emotion import infer_expression_offsets as _ieo

    t0 = time.perf_counter()
    pose_off = _ipo(models.a2p, windows, "zero-shot", rng)
    stage_s["pose"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    exp_off = _ieo(models.a2e, windows, t_encs, "zero-shot", rng)
    stage_s["expression"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    poses = [denormalize_pose_offset(PoseOffset.from_array(r), models.a2p.stats) for r in pose_off]
    blends = np.stack([
        denormalize_blendshape(BlendshapeOffset(r), models.a2e.stats).b for r in exp_off
    ])
    frames = render_parameter_frames(models, poses, blends, features.frames)
    stage_s["render"] = time.perf_counter() - t0

    total = time.perf_counter() - t_total0
    return {
        "n_frames": n_frames,
        "resolution": int(meta["resolution"]),
        "total_s": total,
        "stage_s": stage_s,
        "stage_sum_s": sum(stage_s.values()),
        "fps": n_frames / total,
        "frames_shape": list(frames.shape),
    }
