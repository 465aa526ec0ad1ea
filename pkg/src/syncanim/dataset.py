"""Procedural talking-upper-body scenes with exact ground truth.

The scene is a 2-D billboard rig (torso rectangle, head ellipse, eyes,
brows, mouth) living on a plane at fixed depth inside the unit cube, so
the neural fields have real volumetric structure to learn while every
ground-truth quantity (pose track, blendshape track, landmarks, audio
features) stays closed-form.  Pose tracks mix an audio-coupled component
with a smooth seeded random walk; an explicit silence span reduces motion
amplitude.  Blinks are periodic raised-cosine closures reaching full
closure at the center frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .audiofeat import FeatureTrack, SyntheticFeatureProvider, load_feature_track, save_feature_track
from .audio2emotion import (
    DEFAULT_BLENDSHAPE_NAMES,
    BlendshapeVector,
    ExpressionStats,
    compute_expression_stats,
    read_blendshape_track,
    write_blendshape_track,
)
from .errors import ConfigInvalid, LengthMismatch, MissingFile, StatsMismatch
from .fields import Camera
from .posemath import (
    EulerAngles,
    Pose,
    PoseStats,
    Translation,
    compute_pose_stats,
    read_pose_track,
    write_pose_track,
)

PLANE_Z = 0.5
CAMERA_CENTER = (0.5, 0.5, -4.5)
CAMERA_DISTANCE = PLANE_Z - CAMERA_CENTER[2]  # 5.0
T_NEAR, T_FAR = 4.7, 5.4


@dataclass(frozen=True)
class RigGeometry:
    """Billboard rig in normalized scene units (x right, y down, both in [0,1])."""

    head_center: tuple[float, float] = (0.5, 0.40)
    head_radii: tuple[float, float] = (0.20, 0.23)
    eye_dx: float = 0.085
    eye_dy: float = -0.055
    eye_half_w: float = 0.048
    eye_half_h: float = 0.024
    brow_dy: float = -0.115
    brow_half_w: float = 0.055
    brow_thick: float = 0.013
    brow_raise_gain: float = 0.045
    brow_down_gain: float = 0.035
    brow_inner_gain: float = 0.03
    mouth_dy: float = 0.135
    mouth_half_w: float = 0.055
    mouth_min_h: float = 0.008
    mouth_gain: float = 0.042
    torso_center: tuple[float, float] = (0.5, 0.84)
    torso_half: tuple[float, float] = (0.27, 0.20)
    torso_follow: float = 0.4  # fraction of head translation inherited by the torso
    yaw_shift: float = 0.10  # feature shift per sin(gamma)
    pitch_shift: float = 0.08  # feature shift per sin(beta)
    skin_color: tuple[float, float, float] = (0.83, 0.64, 0.52)
    torso_color: tuple[float, float, float] = (0.45, 0.16, 0.18)
    eye_color: tuple[float, float, float] = (0.08, 0.08, 0.10)
    brow_color: tuple[float, float, float] = (0.25, 0.15, 0.10)
    mouth_color: tuple[float, float, float] = (0.50, 0.13, 0.15)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    n_train: int = 100
    n_eval: int = 50
    fps: float = 25.0
    resolution: int = 64
    blink_period: float = 2.0
    blink_width: float = 0.28  # seconds of raised-cosine closure
    pose_amplitude: tuple[float, ...] = (0.055, 0.05, 0.06, 0.022, 0.016, 0.012)
    audio_coupling: float = 1.0
    audio_weight: float = 0.6  # audio-coupled share of pose motion
    walk_weight: float = 0.8  # random-walk share of pose motion
    walk_rho: float = 0.99  # AR(1) smoothness of the walk
    walk_factors: int = 2  # shared walk factors mixed into the six axes
    env_levels: int = 4  # envelope alphabet size (recurring loudness states)
    env_segment_frames: tuple[int, int] = (8, 14)  # min/max frames per loudness state
    silence_level: float = 0.25  # motion amplitude multiplier inside silence
    # (start, end) fractions of the full timeline; defaults put one window
    # in the train span and one in the eval span
    silence_windows: tuple[tuple[float, float], ...] = ((0.30, 0.47), (0.78, 0.92))
    seed: int = 0
    background_color: tuple[float, float, float] = (0.18, 0.20, 0.25)
    n_mels: int = 80
    clamp_width: float = 3.0
    rig: RigGeometry = field(default_factory=RigGeometry)

    @property
    def n_frames(self) -> int:
        return self.n_train + self.n_eval

    def validate(self) -> None:
        if self.blink_period <= 0:
            raise ConfigInvalid("blink_period must be positive")
        if self.n_train < 2 or self.n_eval < 1:
            raise ConfigInvalid("need at least 2 train frames and 1 eval frame")
        if self.resolution < 16:
            raise ConfigInvalid("resolution below 16 px renders no usable rig")
        if len(self.pose_amplitude) != 6:
            raise ConfigInvalid("pose_amplitude needs 6 entries (3 angles, 3 translations)")
        # worst-case |gamma| must stay inside the gimbal lock guard
        max_gamma = self.pose_amplitude[2] * (self.audio_weight * 3 + self.walk_weight * 4)
        if max_gamma >= math.pi / 2 - 1e-2:
            raise ConfigInvalid("gamma amplitude risks the gimbal lock guard")
        for lo, hi in self.silence_windows:
            if not (0.0 <= lo < hi <= 1.0):
                raise ConfigInvalid(f"bad silence window ({lo}, {hi})")


@dataclass(frozen=True)
class LandmarkSet:
    """Named 2-D pixel coordinates; eye sextets are ordered p1..p6."""

    points: dict[str, np.ndarray]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.points[k] for k in sorted(self.points)], axis=0)


@dataclass
class DatasetBundle:
    manifest: dict
    frames: np.ndarray  # (N, H, W, 3) float64, PNG-quantized
    poses: list[Pose]
    blendshapes: np.ndarray  # (N, B)
    features: FeatureTrack
    envelope: np.ndarray  # (N,)
    silence_mask: np.ndarray  # (N,) bool
    pose_stats: PoseStats
    exp_stats: ExpressionStats
    camera: Camera
    head_region: np.ndarray  # (H, W) bool
    lip_bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    config: SyntheticSceneConfig

    @property
    def n_train(self) -> int:
        return int(self.manifest["n_train"])

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def train_slice(self) -> slice:
        return slice(0, self.n_train)

    def eval_slice(self) -> slice:
        return slice(self.n_train, self.n_frames)


def _rotation2(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _feature_frame(pose: Pose, rig: RigGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Head-space transform: rotation, head center (units), feature shift, scale."""
    rot = _rotation2(pose.euler.alpha)
    center = np.array(rig.head_center) + np.array([pose.trans.x, pose.trans.y])
    shift = np.array(
        [rig.yaw_shift * math.sin(pose.euler.gamma), rig.pitch_shift * math.sin(pose.euler.beta)]
    )
    return rot, center, shift, 1.0


def _place(offset: np.ndarray, rot: np.ndarray, center: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Feature offset (units, head space) -> scene units under the current pose."""
    return center + rot @ (np.asarray(offset) + shift)


def blink_value(t: float, period: float, width: float) -> float:
    """Raised-cosine closure centered at (k + 1/2) * period; exactly 1.0 at center."""
    phase = t % period
    d = phase - period / 2.0
    if abs(d) >= width / 2.0:
        return 0.0
    return math.cos(math.pi * d / width) ** 2


def _silence_weight(frac: float, windows, level: float, ramp: float = 0.02) -> float:
    """1.0 in speech, `level` inside silence windows, cosine-ramped edges."""
    w = 1.0
    for lo, hi in windows:
        if lo - ramp < frac < hi + ramp:
            if frac < lo:
                u = (frac - (lo - ramp)) / ramp
                w = min(w, 1.0 - (1.0 - level) * 0.5 * (1 - math.cos(math.pi * u)))
            elif frac > hi:
                u = ((hi + ramp) - frac) / ramp
                w = min(w, 1.0 - (1.0 - level) * 0.5 * (1 - math.cos(math.pi * u)))
            else:
                w = min(w, level)
    return w


def _ellipse_coverage(px: np.ndarray, py: np.ndarray, center: np.ndarray, radii: np.ndarray,
                      rot: np.ndarray, aa: float) -> np.ndarray:
    """Soft-edged ellipse coverage in [0,1]; aa is the edge half-width in scene units."""
    rx = max(float(radii[0]), 1e-6)
    ry = max(float(radii[1]), 1e-6)
    dx = px - center[0]
    dy = py - center[1]
    # rotate into the ellipse frame
    ex = rot[0, 0] * dx + rot[1, 0] * dy
    ey = rot[0, 1] * dx + rot[1, 1] * dy
    d = np.sqrt((ex / rx) ** 2 + (ey / ry) ** 2 + 1e-12)
    sd = (1.0 - d) * min(rx, ry)  # approximate signed distance
    return np.clip(sd / aa + 0.5, 0.0, 1.0)


def _paint(img: np.ndarray, cov: np.ndarray, color) -> None:
    img += cov[..., None] * (np.asarray(color) - img)


def render_rig_frame(
    pose: Pose,
    blend: np.ndarray,
    mouth_open: float,
    cfg: SyntheticSceneConfig,
) -> np.ndarray:
    """Rasterize one ground-truth frame, float64 (H, W, 3) in [0,1]."""
    rig = cfg.rig
    res = cfg.resolution
    aa = 1.2 / res
    u = (np.arange(res) + 0.5) / res
    px, py = np.meshgrid(u, u, indexing="xy")
    img = np.empty((res, res, 3))
    img[...] = np.asarray(cfg.background_color)

    rot, center, shift, _ = _feature_frame(pose, rig)
    txy = np.array([pose.trans.x, pose.trans.y])

    torso_c = np.array(rig.torso_center) + rig.torso_follow * txy
    cov = _ellipse_coverage(px, py, torso_c, np.array(rig.torso_half) * 1.15,
                            np.eye(2), aa)
    _paint(img, cov, rig.torso_color)

    cov = _ellipse_coverage(px, py, center, np.array(rig.head_radii), rot, aa)
    _paint(img, cov, rig.skin_color)

    for side, sgn in (("l", -1.0), ("r", 1.0)):
        # brows: thin bars whose height tracks raise/down/inner coefficients
        raise_v = blend[_BS_INDEX[f"brow_raise_{'left' if side == 'l' else 'right'}"]]
        down_v = blend[_BS_INDEX[f"brow_down_{'left' if side == 'l' else 'right'}"]]
        inner_v = blend[_BS_INDEX["brow_inner_up"]]
        brow_dy = (rig.brow_dy - rig.brow_raise_gain * raise_v + rig.brow_down_gain * down_v
                   - rig.brow_inner_gain * inner_v * 0.5)
        brow_c = _place(np.array([sgn * rig.eye_dx, brow_dy]), rot, center, shift)
        cov = _ellipse_coverage(px, py, brow_c, np.array([rig.brow_half_w, rig.brow_thick]), rot, aa)
        _paint(img, cov, rig.brow_color)

        blink_v = blend[_BS_INDEX[f"blink_{'left' if side == 'l' else 'right'}"]]
        eye_c = _place(np.array([sgn * rig.eye_dx, rig.eye_dy]), rot, center, shift)
        aperture = max(rig.eye_half_h * (1.0 - blink_v), 1e-5)
        cov = _ellipse_coverage(px, py, eye_c, np.array([rig.eye_half_w, aperture]), rot, aa)
        _paint(img, cov, rig.eye_color)

    mouth_c = _place(np.array([0.0, rig.mouth_dy]), rot, center, shift)
    mouth_h = rig.mouth_min_h + rig.mouth_gain * mouth_open
    cov = _ellipse_coverage(px, py, mouth_c, np.array([rig.mouth_half_w, mouth_h]), rot, aa)
    _paint(img, cov, rig.mouth_color)
    return np.clip(img, 0.0, 1.0)


_BS_INDEX = {name: i for i, name in enumerate(DEFAULT_BLENDSHAPE_NAMES)}


def analytic_landmarks(
    pose: Pose, b: BlendshapeVector | np.ndarray, rig: RigGeometry, resolution: int
) -> LandmarkSet:
    """Closed-form landmark pixel positions under the given pose and blendshapes."""
    blend = b.b if isinstance(b, BlendshapeVector) else np.asarray(b)
    rot, center, shift, _ = _feature_frame(pose, rig)
    pts: dict[str, np.ndarray] = {}
    for side, sgn in (("l", -1.0), ("r", 1.0)):
        blink_v = blend[_BS_INDEX[f"blink_{'left' if side == 'l' else 'right'}"]]
        eye_c = np.array([sgn * rig.eye_dx, rig.eye_dy])
        h = rig.eye_half_h * (1.0 - blink_v)
        w = rig.eye_half_w
        local = np.array(
            [
                [-w, 0.0],            # p1 outer corner
                [-w / 2.0, -h],       # p2 upper lid
                [w / 2.0, -h],        # p3 upper lid
                [w, 0.0],             # p4 inner corner
                [w / 2.0, h],         # p5 lower lid
                [-w / 2.0, h],        # p6 lower lid
            ]
        )
        pts[f"eye_{side}"] = np.stack([_place(eye_c + q, rot, center, shift) for q in local])
        raise_v = blend[_BS_INDEX[f"brow_raise_{'left' if side == 'l' else 'right'}"]]
        down_v = blend[_BS_INDEX[f"brow_down_{'left' if side == 'l' else 'right'}"]]
        inner_v = blend[_BS_INDEX["brow_inner_up"]]
        brow_dy = (rig.brow_dy - rig.brow_raise_gain * raise_v + rig.brow_down_gain * down_v
                   - rig.brow_inner_gain * inner_v * 0.5)
        brow_c = np.array([sgn * rig.eye_dx, brow_dy])
        pts[f"brow_{side}"] = np.stack(
            [_place(brow_c + np.array([dx, 0.0]), rot, center, shift)
             for dx in (-rig.brow_half_w, rig.brow_half_w)]
        )
    mouth_c = np.array([0.0, rig.mouth_dy])
    pts["lip"] = np.stack(
        [_place(mouth_c + np.array([dx, 0.0]), rot, center, shift)
         for dx in (-rig.mouth_half_w, rig.mouth_half_w)]
    )
    return LandmarkSet(points={k: v * resolution for k, v in pts.items()})


def _ou_walk(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance AR(1) sample path."""
    sigma_step = math.sqrt(1.0 - rho * rho)
    x = np.empty(n)
    x[0] = rng.normal()
    for k in range(1, n):
        x[k] = rho * x[k - 1] + sigma_step * rng.normal()
    return x


def _step_envelope(n: int, cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant loudness states from a small alphabet.

    The same local level patterns recur throughout the clip, which keeps the
    audio-to-pose mapping one-to-many: audio features identify the loudness
    state, never the individual frame.
    """
    levels = np.linspace(0.0, 1.0, cfg.env_levels)
    lo, hi = cfg.env_segment_frames
    env = np.empty(n)
    pos = 0
    current = int(rng.integers(1, cfg.env_levels))  # start audible
    while pos < n:
        length = int(rng.integers(lo, hi + 1))
        env[pos : pos + length] = levels[current]
        pos += length
        step = int(rng.integers(1, cfg.env_levels))  # nonzero hop through the alphabet
        current = (current + step) % cfg.env_levels
    return env


def _smooth(x: np.ndarray, width: int = 5) -> np.ndarray:
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    return np.convolve(x, kernel, mode="same")


# per-axis (lag frames, envelope gain, quadratic gain) for the audio-coupled part
_AXIS_DRIVES = (
    (0, 1.0, 0.0),
    (1, -0.8, 0.5),
    (2, 0.7, 0.0),
    (1, 1.0, 0.0),
    (0, -0.6, 0.4),
    (2, 0.5, 0.0),
)


def generate_synthetic_dataset(cfg: SyntheticSceneConfig) -> DatasetBundle:
    cfg.validate()
    n = cfg.n_frames
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(n) / cfg.fps
    frac = np.arange(n) / max(n - 1, 1)

    sil_w = np.array([_silence_weight(f, cfg.silence_windows, cfg.silence_level) for f in frac])
    silence_mask = np.array(
        [any(lo <= f <= hi for lo, hi in cfg.silence_windows) for f in frac], dtype=bool
    )

    raw_env = _step_envelope(n, cfg, rng)
    speech_w = (sil_w - cfg.silence_level) / (1.0 - cfg.silence_level)  # 0 in silence
    envelope = raw_env * speech_w

    env_smooth = _smooth(envelope)
    env_centered = (env_smooth - env_smooth.mean()) / max(env_smooth.std(), 1e-9)
    drives = np.empty((n, 6))
    for ax, (lag, gain, quad) in enumerate(_AXIS_DRIVES):
        shifted = np.roll(env_centered, lag)
        shifted[:lag] = env_centered[0]
        drives[:, ax] = gain * shifted + quad * (shifted**2 - 1.0)
        drives[:, ax] /= max(drives[:, ax].std(), 1e-9)
    # few shared smooth factors mixed into all six axes: the unpredictable
    # motion component stays low-dimensional
    factors = np.stack([_ou_walk(n, cfg.walk_rho, rng) for _ in range(cfg.walk_factors)], axis=1)
    mix = rng.normal(0.0, 1.0, (6, cfg.walk_factors))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    walks = factors @ mix.T
    walks /= np.maximum(walks.std(axis=0), 1e-9)

    amp = np.asarray(cfg.pose_amplitude)
    pose_arr = (
        amp[None, :]
        * sil_w[:, None]
        * (cfg.audio_weight * cfg.audio_coupling * drives + cfg.walk_weight * walks)
    )
    poses = [Pose.from_array(row) for row in pose_arr]

    blend = np.zeros((n, len(DEFAULT_BLENDSHAPE_NAMES)))
    blink = np.array([blink_value(tt, cfg.blink_period, cfg.blink_width) for tt in t])
    blend[:, _BS_INDEX["blink_left"]] = blink
    blend[:, _BS_INDEX["blink_right"]] = blink
    blend[:, _BS_INDEX["brow_raise_left"]] = np.clip(
        0.3 + 0.18 * np.sin(2 * math.pi * t / 3.7) + 0.15 * cfg.audio_coupling * envelope, 0, 1
    )
    blend[:, _BS_INDEX["brow_raise_right"]] = np.clip(
        0.3 + 0.18 * np.sin(2 * math.pi * t / 3.7 + 0.4) + 0.15 * cfg.audio_coupling * envelope, 0, 1
    )
    blend[:, _BS_INDEX["brow_down_left"]] = np.clip(0.25 + 0.15 * np.sin(2 * math.pi * t / 5.3), 0, 1)
    blend[:, _BS_INDEX["brow_down_right"]] = np.clip(
        0.25 + 0.15 * np.sin(2 * math.pi * t / 5.3 + 0.7), 0, 1
    )
    blend[:, _BS_INDEX["brow_inner_up"]] = np.clip(0.35 + 0.2 * np.sin(2 * math.pi * t / 2.9), 0, 1)

    provider = SyntheticFeatureProvider(n_mels=cfg.n_mels, fps=cfg.fps,
                                        quant_levels=cfg.env_levels)
    features = provider.from_envelope(envelope, seed=cfg.seed + 1)
    # the rendered mouth follows the quantized envelope the features expose,
    # so lip motion is exactly recoverable from the audio stream
    env_q = provider.quantize(envelope)

    frames = np.empty((n, cfg.resolution, cfg.resolution, 3))
    for i in range(n):
        img = render_rig_frame(poses[i], blend[i], float(env_q[i]), cfg)
        frames[i] = np.round(img * 255.0) / 255.0  # PNG-quantized ground truth

    train = slice(0, cfg.n_train)
    pose_stats = compute_pose_stats(poses[train], clamp_width=cfg.clamp_width)
    exp_stats = compute_expression_stats(blend[train], clamp_width=cfg.clamp_width)

    camera = Camera(
        width=cfg.resolution, height=cfg.resolution, focal=CAMERA_DISTANCE * cfg.resolution,
        pose=Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0)),
        t_near=T_NEAR, t_far=T_FAR, center=CAMERA_CENTER,
    )

    head_region, lip_bbox = _region_boxes(poses, blend, cfg)

    manifest = _build_manifest(cfg, pose_stats, exp_stats, lip_bbox, head_region)
    return DatasetBundle(
        manifest=manifest, frames=frames, poses=poses, blendshapes=blend,
        features=features, envelope=envelope, silence_mask=silence_mask,
        pose_stats=pose_stats, exp_stats=exp_stats, camera=camera,
        head_region=head_region, lip_bbox=lip_bbox, config=cfg,
    )


def _region_boxes(poses, blend, cfg: SyntheticSceneConfig):
    """Union head bbox (dilated) and union lip bbox over all frames, in pixels."""
    res = cfg.resolution
    rig = cfg.rig
    head_lo = np.array([1.0, 1.0])
    head_hi = np.array([0.0, 0.0])
    lip_lo = np.array([1.0, 1.0])
    lip_hi = np.array([0.0, 0.0])
    for i, pose in enumerate(poses):
        rot, center, shift, _ = _feature_frame(pose, rig)
        r = max(rig.head_radii)
        head_lo = np.minimum(head_lo, center - r)
        head_hi = np.maximum(head_hi, center + r)
        mouth_c = _place(np.array([0.0, rig.mouth_dy]), rot, center, shift)
        ext = np.array([rig.mouth_half_w + 0.02, rig.mouth_min_h + rig.mouth_gain + 0.02])
        lip_lo = np.minimum(lip_lo, mouth_c - ext)
        lip_hi = np.maximum(lip_hi, mouth_c + ext)
    dilate = 3
    hx0, hy0 = np.clip((head_lo * res).astype(int) - dilate, 0, res)
    hx1, hy1 = np.clip((head_hi * res).astype(int) + 1 + dilate, 0, res)
    mask = np.zeros((res, res), dtype=bool)
    mask[hy0:hy1, hx0:hx1] = True
    lx0, ly0 = np.clip((lip_lo * res).astype(int), 0, res)
    lx1, ly1 = np.clip((lip_hi * res).astype(int) + 1, 0, res)
    return mask, (int(lx0), int(ly0), int(lx1), int(ly1))


def _fmt_floats(vals) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(vals).reshape(-1))


def _build_manifest(cfg, pose_stats, exp_stats, lip_bbox, head_region) -> dict:
    ys, xs = np.where(head_region)
    return {
        "n_train": cfg.n_train,
        "n_eval": cfg.n_eval,
        "fps": repr(cfg.fps),
        "resolution": cfg.resolution,
        "blink_period": repr(cfg.blink_period),
        "blink_width": repr(cfg.blink_width),
        "seed": cfg.seed,
        "n_mels": cfg.n_mels,
        "clamp_width": repr(cfg.clamp_width),
        "background": _fmt_floats(cfg.background_color),
        "pose_mean": _fmt_floats(pose_stats.mean_array()),
        "pose_std": _fmt_floats(pose_stats.std_array()),
        "exp_mean": _fmt_floats(exp_stats.mean_b),
        "exp_std": _fmt_floats(exp_stats.std_b),
        "head_region": f"{xs.min()},{ys.min()},{xs.max() + 1},{ys.max() + 1}",
        "lip_bbox": ",".join(str(v) for v in lip_bbox),
        "camera_focal": repr(CAMERA_DISTANCE * cfg.resolution),
        "camera_center": _fmt_floats(CAMERA_CENTER),
        "t_near": repr(T_NEAR),
        "t_far": repr(T_FAR),
        "blendshape_names": ",".join(DEFAULT_BLENDSHAPE_NAMES),
        "pose_amplitude": _fmt_floats(cfg.pose_amplitude),
        "audio_coupling": repr(cfg.audio_coupling),
        "audio_weight": repr(cfg.audio_weight),
        "walk_weight": repr(cfg.walk_weight),
        "walk_rho": repr(cfg.walk_rho),
        "walk_factors": cfg.walk_factors,
        "env_levels": cfg.env_levels,
        "env_segment_frames": f"{cfg.env_segment_frames[0]},{cfg.env_segment_frames[1]}",
        "silence_level": repr(cfg.silence_level),
        "silence_windows": ";".join(f"{repr(lo)},{repr(hi)}" for lo, hi in cfg.silence_windows),
        "blink_width_frames": int(round(cfg.blink_width * cfg.fps)),
    }


def save_dataset(bundle: DatasetBundle, path: Path | str) -> None:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in bundle.manifest.items()]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    for i in range(bundle.n_frames):
        arr = np.round(bundle.frames[i] * 255.0).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(root / "frames" / f"{i:06d}.png")
    write_pose_track(root / "pose.csv", bundle.poses)
    write_blendshape_track(root / "blendshapes.csv", bundle.blendshapes)
    save_feature_track(root / "features.syaf", bundle.features)
    aux = ["frame,envelope,silence"]
    for i in range(bundle.n_frames):
        aux.append(f"{i},{repr(float(bundle.envelope[i]))},{int(bundle.silence_mask[i])}")
    (root / "aux.csv").write_text("\n".join(aux) + "\n")
    lm_lines = ["frame," + ",".join(
        f"{k}_{j}_{c}" for k in ("brow_l", "brow_r", "eye_l", "eye_r", "lip")
        for j in range(_LM_COUNTS[k]) for c in ("x", "y")
    )]
    for i in range(bundle.n_frames):
        lm = analytic_landmarks(bundle.poses[i], bundle.blendshapes[i],
                                bundle.config.rig, bundle.config.resolution)
        flat = np.concatenate([lm.points[k].reshape(-1) for k in sorted(lm.points)])
        lm_lines.append(f"{i}," + ",".join(repr(float(v)) for v in flat))
    (root / "landmarks.csv").write_text("\n".join(lm_lines) + "\n")


_LM_COUNTS = {"brow_l": 2, "brow_r": 2, "eye_l": 6, "eye_r": 6, "lip": 2}


def _parse_manifest(path: Path) -> dict:
    if not path.exists():
        raise MissingFile(f"{path} not found")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_dataset(path: Path | str) -> DatasetBundle:
    """Read a bundle back and re-validate every cross-file invariant."""
    root = Path(path)
    man = _parse_manifest(root / "manifest.txt")
    n_train, n_eval = int(man["n_train"]), int(man["n_eval"])
    n = n_train + n_eval
    res = int(man["resolution"])

    cfg = SyntheticSceneConfig(
        n_train=n_train, n_eval=n_eval, fps=float(man["fps"]), resolution=res,
        blink_period=float(man["blink_period"]), blink_width=float(man["blink_width"]),
        pose_amplitude=tuple(float(v) for v in man["pose_amplitude"].split(",")),
        audio_coupling=float(man["audio_coupling"]), audio_weight=float(man["audio_weight"]),
        walk_weight=float(man["walk_weight"]), walk_rho=float(man["walk_rho"]),
        walk_factors=int(man["walk_factors"]), env_levels=int(man["env_levels"]),
        env_segment_frames=tuple(int(v) for v in man["env_segment_frames"].split(",")),
        silence_level=float(man["silence_level"]),
        silence_windows=tuple(
            tuple(float(v) for v in w.split(",")) for w in man["silence_windows"].split(";")
        ),
        seed=int(man["seed"]),
        background_color=tuple(float(v) for v in man["background"].split(",")),
        n_mels=int(man["n_mels"]), clamp_width=float(man["clamp_width"]),
    )

    frames = np.empty((n, res, res, 3))
    for i in range(n):
        fp = root / "frames" / f"{i:06d}.png"
        if not fp.exists():
            raise MissingFile(f"frame file {fp} missing")
        frames[i] = np.asarray(Image.open(fp), dtype=np.float64) / 255.0

    poses = read_pose_track(root / "pose.csv")
    blend = read_blendshape_track(root / "blendshapes.csv")
    features = load_feature_track(root / "features.syaf", fps=cfg.fps)
    aux_lines = (root / "aux.csv").read_text().strip().splitlines()[1:]
    envelope = np.array([float(l.split(",")[1]) for l in aux_lines])
    silence = np.array([bool(int(l.split(",")[2])) for l in aux_lines])

    lengths = {"poses": len(poses), "blendshapes": blend.shape[0],
               "features": len(features), "aux": len(envelope), "frames": n}
    if len(set(lengths.values())) != 1:
        raise LengthMismatch(f"track lengths disagree: {lengths}")

    pose_stats = compute_pose_stats(poses[:n_train], clamp_width=cfg.clamp_width)
    exp_stats = compute_expression_stats(blend[:n_train], clamp_width=cfg.clamp_width)
    for key, got in (
        ("pose_mean", pose_stats.mean_array()),
        ("pose_std", pose_stats.std_array()),
        ("exp_mean", exp_stats.mean_b),
        ("exp_std", exp_stats.std_b),
    ):
        recorded = np.array([float(v) for v in man[key].split(",")])
        if recorded.shape != got.shape or np.abs(recorded - got).max() > 1e-9:
            raise StatsMismatch(f"{key} in manifest disagrees with recomputed track stats")

    hx0, hy0, hx1, hy1 = (int(v) for v in man["head_region"].split(","))
    head_region = np.zeros((res, res), dtype=bool)
    head_region[hy0:hy1, hx0:hx1] = True
    lip_bbox = tuple(int(v) for v in man["lip_bbox"].split(","))

    camera = Camera(
        width=res, height=res, focal=float(man["camera_focal"]),
        pose=Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0)),
        t_near=float(man["t_near"]), t_far=float(man["t_far"]),
        center=tuple(float(v) for v in man["camera_center"].split(",")),
    )
    return DatasetBundle(
        manifest=man, frames=frames, poses=poses, blendshapes=blend, features=features,
        envelope=envelope, silence_mask=silence, pose_stats=pose_stats, exp_stats=exp_stats,
        camera=camera, head_region=head_region, lip_bbox=lip_bbox, config=cfg,
    )
