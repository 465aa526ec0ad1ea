"""Evaluation metrics: image quality, EAR/blinks, motion diversity, landmark distance.

PSNR/SSIM operate on float images in [0, 1].  SSIM uses the standard
Gaussian-windowed formulation (K1=0.01, K2=0.03, sigma=1.5, 11x11 window,
population covariance) so it can be cross-checked against reference
implementations bit-for-bit at float64.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import RigGeometry, analytic_landmarks
from .errors import DegenerateEye, LengthMismatch, ShapeMismatch, TooShort

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window at sigma 1.5
DEFAULT_CLOSE_THRESH = 0.1


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at 99 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"images {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _ssim_maps_single(a: np.ndarray, b: np.ndarray):
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    fargs = {"sigma": SSIM_SIGMA, "truncate": SSIM_TRUNCATE}
    ua = gaussian_filter(a, **fargs)
    ub = gaussian_filter(b, **fargs)
    uaa = gaussian_filter(a * a, **fargs)
    ubb = gaussian_filter(b * b, **fargs)
    uab = gaussian_filter(a * b, **fargs)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    vab = uab - ua * ub
    lum = (2 * ua * ub + c1) / (ua**2 + ub**2 + c1)
    cs = (2 * vab + c2) / (va + vb + c2)
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    crop = (slice(pad, a.shape[0] - pad), slice(pad, a.shape[1] - pad))
    return lum[crop], cs[crop]


def _channels(img: np.ndarray) -> list[np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return [img]
    return [img[..., c] for c in range(img.shape[-1])]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM; channels are scored independently and averaged."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"images {a.shape} vs {b.shape}")
    scores = []
    for ca, cb in zip(_channels(a), _channels(b)):
        lum, cs = _ssim_maps_single(ca, cb)
        scores.append(float(np.mean(lum * cs)))
    return float(np.mean(scores))


def ssim_components(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(luminance term, contrast-structure term), each averaged over the image."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"images {a.shape} vs {b.shape}")
    lums, css = [], []
    for ca, cb in zip(_channels(a), _channels(b)):
        lum, cs = _ssim_maps_single(ca, cb)
        lums.append(float(np.mean(lum)))
        css.append(float(np.mean(cs)))
    return float(np.mean(lums)), float(np.mean(css))


def ear(eye_sextet: np.ndarray) -> float:
    """(|p2-p6| + |p3-p5|) / (2 |p1-p4|) on a (6, 2) landmark array."""
    p = np.asarray(eye_sextet, dtype=np.float64)
    if p.shape != (6, 2):
        raise ShapeMismatch(f"eye sextet must be (6, 2), got {p.shape}")
    horiz = np.linalg.norm(p[0] - p[3])
    if horiz <= 1e-12:
        raise DegenerateEye("horizontal eye span is zero")
    v1 = np.linalg.norm(p[1] - p[5])
    v2 = np.linalg.norm(p[2] - p[4])
    return float((v1 + v2) / (2.0 * horiz))


def count_blinks(ear_track: np.ndarray, close_thresh: float = DEFAULT_CLOSE_THRESH) -> int:
    """Number of maximal runs of frames with EAR below the closure threshold."""
    closed = np.asarray(ear_track) < close_thresh
    return int(np.sum(closed[1:] & ~closed[:-1]) + (1 if closed.size and closed[0] else 0))


def ear_error_and_blinks(
    pred_track: np.ndarray, gt_track: np.ndarray, close_thresh: float = DEFAULT_CLOSE_THRESH
) -> tuple[float, int, int]:
    pred = np.asarray(pred_track, dtype=np.float64)
    gt = np.asarray(gt_track, dtype=np.float64)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"EAR tracks {pred.shape} vs {gt.shape}")
    err = float(np.mean(np.abs(pred - gt)))
    return err, count_blinks(pred, close_thresh), count_blinks(gt, close_thresh)


def head_motion_diversity(euler_track: np.ndarray) -> float:
    """Mean over the three angles of the per-angle standard deviation, in degrees."""
    arr = np.asarray(euler_track, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"expected (N, 3) Euler track, got {arr.shape}")
    if arr.shape[0] < 2:
        raise TooShort("diversity needs at least 2 frames")
    return float(np.degrees(arr.std(axis=0)).mean())


def landmark_distance(
    pred_params: tuple[list, np.ndarray],
    gt_params: tuple[list, np.ndarray],
    rig: RigGeometry,
    resolution: int,
) -> float:
    """Mean L2 distance (pixels) between analytic landmark sets of two parameter tracks.

    Each params tuple is (poses, blendshape_track).
    """
    pred_poses, pred_blend = pred_params
    gt_poses, gt_blend = gt_params
    if len(pred_poses) != len(gt_poses) or len(pred_blend) != len(gt_blend):
        raise LengthMismatch("parameter tracks have different frame counts")
    dists = []
    for i in range(len(pred_poses)):
        lp = analytic_landmarks(pred_poses[i], pred_blend[i], rig, resolution).stacked()
        lg = analytic_landmarks(gt_poses[i], gt_blend[i], rig, resolution).stacked()
        dists.append(np.linalg.norm(lp - lg, axis=1).mean())
    return float(np.mean(dists))


def ear_track_from_params(poses: list, blend: np.ndarray, rig: RigGeometry, resolution: int) -> np.ndarray:
    """Mean-of-both-eyes EAR per frame from analytic landmarks."""
    out = np.empty(len(poses))
    for i in range(len(poses)):
        lm = analytic_landmarks(poses[i], blend[i], rig, resolution)
        out[i] = 0.5 * (ear(lm.points["eye_l"]) + ear(lm.points["eye_r"]))
    return out
