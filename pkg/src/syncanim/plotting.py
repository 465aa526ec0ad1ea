"""Figure writers for the evaluation/report path (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams.update({
    "figure.figsize": (7.0, 3.2),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
})

EULER_LABELS = ("alpha", "beta", "gamma")


def plot_ear_tracks(path: Path | str, gt_ear: np.ndarray, pred_ear: np.ndarray,
                    close_thresh: float) -> Path:
    fig, ax = plt.subplots()
    frames = np.arange(len(gt_ear))
    ax.plot(frames, gt_ear, label="ground truth", lw=1.2)
    ax.plot(frames, pred_ear, label="predicted", lw=1.2)
    ax.axhline(close_thresh, color="k", ls="--", lw=0.8, label="closure threshold")
    ax.set_xlabel("frame")
    ax.set_ylabel("EAR")
    ax.legend(loc="upper right")
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_pose_tracks(path: Path | str, gt_euler: np.ndarray, pred_euler: np.ndarray) -> Path:
    fig, axes = plt.subplots(3, 1, figsize=(7.0, 5.4), sharex=True)
    frames = np.arange(gt_euler.shape[0])
    for i, ax in enumerate(axes):
        ax.plot(frames, np.degrees(gt_euler[:, i]), label="ground truth", lw=1.0)
        ax.plot(frames, np.degrees(pred_euler[:, i]), label="predicted", lw=1.0)
        ax.set_ylabel(f"{EULER_LABELS[i]} (deg)")
    axes[-1].set_xlabel("frame")
    axes[0].legend(loc="upper right")
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_diversity_bars(path: Path | str, speech: float, silence: float) -> Path:
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    ax.bar(["speech", "silence"], [speech, silence], color=["#4878a8", "#a85448"])
    ax.set_ylabel("head-motion diversity (deg)")
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_loss_log(path: Path | str, rows: list) -> Path:
    fig, ax = plt.subplots()
    arr = np.array([(r[0], r[1], r[2]) for r in rows])
    for stage in (1, 2, 3):
        sel = arr[:, 1] == stage
        if sel.any():
            ax.plot(arr[sel, 0], arr[sel, 2], lw=0.8, label=f"stage {stage}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
