"""Rotation/Euler conversions, pose statistics, and z-score pose offsets.

A head pose is three Euler angles (alpha, beta, gamma) plus a translation.
Angles are extracted from a rotation matrix with atan2 formulas whose
singularity sits on gamma; poses near |gamma| = pi/2 are rejected rather
than approximated.  Offsets are per-axis z-scores of the deviation from the
track mean, clamped to a fixed box so downstream predictors work on a
bounded range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySequence, GimbalLock, NotARotation

ORTHO_TOL = 1e-9
LOCK_GUARD = 1e-3  # rad; reject |gamma| >= pi/2 - LOCK_GUARD
STD_FLOOR = 1e-6  # keeps constant tracks from dividing by zero
DEFAULT_CLAMP_WIDTH = 3.0  # z-score units


@dataclass(frozen=True)
class EulerAngles:
    alpha: float
    beta: float
    gamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma], dtype=np.float64)


@dataclass(frozen=True)
class Translation:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    euler: EulerAngles
    trans: Translation

    def as_array(self) -> np.ndarray:
        """Six components in canonical order (alpha, beta, gamma, x, y, z)."""
        return np.concatenate([self.euler.as_array(), self.trans.as_array()])

    @staticmethod
    def from_array(v: np.ndarray) -> "Pose":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Pose(EulerAngles(v[0], v[1], v[2]), Translation(v[3], v[4], v[5]))


@dataclass(frozen=True)
class PoseStats:
    """Track mean and deviation scale, plus the offset clamp half-width."""

    mean_euler: EulerAngles
    mean_trans: Translation
    std_offset_euler: np.ndarray
    std_offset_trans: np.ndarray
    clamp_width: float = DEFAULT_CLAMP_WIDTH

    def mean_array(self) -> np.ndarray:
        return np.concatenate([self.mean_euler.as_array(), self.mean_trans.as_array()])

    def std_array(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.std_offset_euler, dtype=np.float64),
             np.asarray(self.std_offset_trans, dtype=np.float64)]
        )


@dataclass(frozen=True)
class PoseOffset:
    off_e: np.ndarray
    off_t: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.off_e, dtype=np.float64),
             np.asarray(self.off_t, dtype=np.float64)]
        )

    @staticmethod
    def from_array(v: np.ndarray) -> "PoseOffset":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return PoseOffset(v[:3].copy(), v[3:].copy())


def validate_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    """Return ``r`` as a float64 3x3 array, or raise NotARotation."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got shape {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise NotARotation(f"matrix not orthonormal: max |R^T R - I| = {err:.3e}")
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > tol:
        raise NotARotation(f"determinant {det!r} != 1")
    return r


def rotation_to_euler(r: np.ndarray, lock_guard: float = LOCK_GUARD) -> EulerAngles:
    """Extract (alpha, beta, gamma) from a rotation matrix.

    beta  = atan2(R32, R33)
    gamma = atan2(-R31, sqrt(R32^2 + R33^2))
    alpha = atan2(R21, R11)

    Raises GimbalLock when |gamma| >= pi/2 - lock_guard: there cos(gamma)
    vanishes and alpha/beta are no longer separable.
    """
    r = validate_rotation(r)
    cos_gamma = math.hypot(r[2, 1], r[2, 2])
    # cos(gamma) <= sin(lock_guard)  <=>  |gamma| >= pi/2 - lock_guard
    if cos_gamma <= math.sin(lock_guard):
        raise GimbalLock(
            f"|gamma| within {lock_guard:g} rad of pi/2; extraction not invertible"
        )
    beta = math.atan2(r[2, 1], r[2, 2])
    gamma = math.atan2(-r[2, 0], cos_gamma)
    alpha = math.atan2(r[1, 0], r[0, 0])
    return EulerAngles(alpha, beta, gamma)


def euler_to_rotation(e: EulerAngles, lock_guard: float = LOCK_GUARD) -> np.ndarray:
    """Compose R = Rz(alpha) @ Ry(gamma) @ Rx(beta).

    This is the unique composition order whose extraction formulas are the
    ones in :func:`rotation_to_euler`, so the round trip is exact away from
    the lock guard.
    """
    for name, v in (("alpha", e.alpha), ("beta", e.beta), ("gamma", e.gamma)):
        if not (-math.pi < v <= math.pi):
            raise ValueError(f"{name} = {v!r} outside (-pi, pi]")
    if abs(e.gamma) >= math.pi / 2 - lock_guard:
        raise GimbalLock(f"gamma = {e.gamma!r} inside the lock guard")
    ca, sa = math.cos(e.alpha), math.sin(e.alpha)
    cb, sb = math.cos(e.beta), math.sin(e.beta)
    cg, sg = math.cos(e.gamma), math.sin(e.gamma)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cg, 0.0, sg], [0.0, 1.0, 0.0], [-sg, 0.0, cg]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    return rz @ ry @ rx


def compute_pose_stats(
    poses: Sequence[Pose], clamp_width: float = DEFAULT_CLAMP_WIDTH
) -> PoseStats:
    """Component-wise means and population stds of deviations, floored at STD_FLOOR."""
    if len(poses) < 2:
        raise EmptySequence(f"need at least 2 poses, got {len(poses)}")
    if clamp_width <= 0:
        raise ValueError(f"clamp_width must be positive, got {clamp_width!r}")
    arr = np.stack([p.as_array() for p in poses])  # (N, 6)
    mean = arr.mean(axis=0)
    std = np.maximum(arr.std(axis=0), STD_FLOOR)
    return PoseStats(
        mean_euler=EulerAngles(*mean[:3]),
        mean_trans=Translation(*mean[3:]),
        std_offset_euler=std[:3],
        std_offset_trans=std[3:],
        clamp_width=float(clamp_width),
    )


def normalize_pose_offset(p: Pose, stats: PoseStats) -> PoseOffset:
    """Per-axis z-score of the deviation from the mean, clamped to +/- clamp_width."""
    off = (p.as_array() - stats.mean_array()) / stats.std_array()
    off = np.clip(off, -stats.clamp_width, stats.clamp_width)
    return PoseOffset(off[:3], off[3:])


def denormalize_pose_offset(off: PoseOffset, stats: PoseStats) -> Pose:
    """Inverse of :func:`normalize_pose_offset` on the non-clamped region."""
    v = stats.mean_array() + off.as_array() * stats.std_array()
    return Pose.from_array(v)


POSE_CSV_HEADER = "frame,alpha,beta,gamma,x,y,z"


def write_pose_track(path: Path | str, poses: Sequence[Pose]) -> None:
    """CSV with header ``frame,alpha,beta,gamma,x,y,z``; radians / scene units."""
    lines = [POSE_CSV_HEADER]
    for i, p in enumerate(poses):
        vals = ",".join(repr(float(v)) for v in p.as_array())
        lines.append(f"{i},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_track(path: Path | str) -> list[Pose]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != POSE_CSV_HEADER:
        raise ValueError(f"{path}: missing pose CSV header {POSE_CSV_HEADER!r}")
    poses = []
    for line in text[1:]:
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"{path}: bad row {line!r}")
        poses.append(Pose.from_array(np.array([float(v) for v in parts[1:]])))
    return poses
