"""Evaluation report: metrics CSV, plain-text summary, optional JSON, figures."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics, plotting
from .audio2emotion import read_blendshape_track
from .dataset import DatasetBundle
from .errors import LengthMismatch, MissingFile
from .metrics import DEFAULT_CLOSE_THRESH
from .posemath import normalize_pose_offset, read_pose_track


def load_prediction_dir(pred_dir: Path | str) -> tuple[np.ndarray | None, list, np.ndarray]:
    pred = Path(pred_dir)
    pose_csv = pred / "pose.csv"
    blend_csv = pred / "blendshapes.csv"
    if not pose_csv.exists() or not blend_csv.exists():
        raise MissingFile(f"{pred} lacks pose.csv/blendshapes.csv")
    poses = read_pose_track(pose_csv)
    blends = read_blendshape_track(blend_csv)
    frames = None
    frame_dir = pred / "frames"
    if frame_dir.exists():
        paths = sorted(frame_dir.glob("*.png"))
        if paths:
            frames = np.stack(
                [np.asarray(Image.open(p), dtype=np.float64) / 255.0 for p in paths]
            )
    return frames, poses, blends


def evaluate_outputs(
    pred_dir: Path | str,
    bundle: DatasetBundle,
    out_dir: Path | str,
    write_json: bool = False,
    close_thresh: float = DEFAULT_CLOSE_THRESH,
) -> dict:
    """Compare an inference output directory against the bundle's eval split."""
    frames, poses, blends = load_prediction_dir(pred_dir)
    sl = bundle.eval_slice()
    gt_frames = bundle.frames[sl]
    gt_poses = bundle.poses[sl]
    gt_blend = bundle.blendshapes[sl]
    sil = bundle.silence_mask[sl]
    n = len(gt_poses)
    if len(poses) != n:
        raise LengthMismatch(f"prediction has {len(poses)} frames, eval split has {n}")

    rig, res = bundle.config.rig, bundle.config.resolution
    pred_off = np.stack([normalize_pose_offset(p, bundle.pose_stats).as_array() for p in poses])
    gt_off = np.stack([normalize_pose_offset(p, bundle.pose_stats).as_array() for p in gt_poses])
    pred_euler = np.stack([p.euler.as_array() for p in poses])
    gt_euler = np.stack([p.euler.as_array() for p in gt_poses])

    pred_ear = metrics.ear_track_from_params(poses, blends, rig, res)
    gt_ear = metrics.ear_track_from_params(gt_poses, gt_blend, rig, res)
    ear_mae, pred_blinks, gt_blinks = metrics.ear_error_and_blinks(pred_ear, gt_ear, close_thresh)

    result = {
        "frames": n,
        "pose_l1": float(np.abs(pred_off - gt_off).mean()),
        "ear_mae": ear_mae,
        "pred_blinks": pred_blinks,
        "gt_blinks": gt_blinks,
        "lmd": metrics.landmark_distance((poses, blends), (gt_poses, gt_blend), rig, res),
        "diversity_speech": metrics.head_motion_diversity(pred_euler[~sil]) if (~sil).sum() > 1 else 0.0,
        "diversity_silence": metrics.head_motion_diversity(pred_euler[sil]) if sil.sum() > 1 else 0.0,
    }
    if frames is not None:
        if frames.shape[0] != n:
            raise LengthMismatch(f"{frames.shape[0]} rendered frames vs {n} eval frames")
        result["psnr"] = float(np.mean([metrics.psnr(frames[i], gt_frames[i]) for i in range(n)]))
        result["ssim"] = float(np.mean([metrics.ssim(frames[i], gt_frames[i]) for i in range(n)]))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(result)
    lines = ["metric,value"] + [f"{k},{result[k]!r}" for k in keys]
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    summary = ["evaluation summary", "------------------"]
    for k in keys:
        summary.append(f"{k:>20}: {result[k]}")
    (out / "report.txt").write_text("\n".join(summary) + "\n")
    if write_json:
        (out / "report.json").write_text(json.dumps(result, sort_keys=True, indent=1))

    figdir = out / "figures"
    figdir.mkdir(exist_ok=True)
    plotting.plot_ear_tracks(figdir / "ear.png", gt_ear, pred_ear, close_thresh)
    plotting.plot_pose_tracks(figdir / "pose_tracks.png", gt_euler, pred_euler)
    plotting.plot_diversity_bars(figdir / "diversity.png",
                                 result["diversity_speech"], result["diversity_silence"])
    return result
