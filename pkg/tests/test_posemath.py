import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syncanim.errors import EmptySequence, GimbalLock, NotARotation
from syncanim.posemath import (
    EulerAngles,
    Pose,
    PoseOffset,
    Translation,
    compute_pose_stats,
    denormalize_pose_offset,
    euler_to_rotation,
    normalize_pose_offset,
    read_pose_track,
    rotation_to_euler,
    write_pose_track,
)


def make_pose(vals):
    return Pose.from_array(np.array(vals, dtype=np.float64))


class TestRotationToEuler:
    def test_identity_matrix(self):
        e = rotation_to_euler(np.eye(3))
        assert e.alpha == 0.0 and e.beta == 0.0 and e.gamma == 0.0

    def test_round_trip_single_case(self):
        r = euler_to_rotation(EulerAngles(0.3, -0.2, 0.4))
        e = rotation_to_euler(r)
        assert abs(e.alpha - 0.3) < 1e-9
        assert abs(e.beta - -0.2) < 1e-9
        assert abs(e.gamma - 0.4) < 1e-9

    def test_gimbal_lock_rejected(self):
        # gamma = pi/2 puts R[2,0] = -1 and annihilates the third row's other entries
        r = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
        with pytest.raises(GimbalLock):
            rotation_to_euler(r)

    def test_non_orthonormal_rejected(self):
        with pytest.raises(NotARotation):
            rotation_to_euler(np.eye(3) * 1.001)

    def test_reflection_rejected(self):
        r = np.diag([1.0, 1.0, -1.0])  # orthonormal but det = -1
        with pytest.raises(NotARotation):
            rotation_to_euler(r)


class TestEulerToRotation:
    def test_zero_angles_identity(self):
        assert np.allclose(euler_to_rotation(EulerAngles(0, 0, 0)), np.eye(3), atol=0)

    def test_single_axis_closed_form(self):
        r = euler_to_rotation(EulerAngles(math.pi / 6, 0.0, 0.0))
        assert abs(r[1, 0] - 0.5) < 1e-12
        assert abs(r[0, 0] - math.sqrt(3) / 2) < 1e-12

    def test_lock_guard_enforced(self):
        with pytest.raises(GimbalLock):
            euler_to_rotation(EulerAngles(0.0, 0.0, math.pi / 2 - 1e-4))

    def test_out_of_range_angle_rejected(self):
        with pytest.raises(ValueError):
            euler_to_rotation(EulerAngles(3.5, 0.0, 0.0))

    def test_random_sweep_round_trip_and_orthonormality(self):
        # acceptance-grade property at reduced size; the full 1e4 sweep is in acceptance
        rng = np.random.default_rng(0)
        lim = math.radians(60.0)
        for _ in range(500):
            a, b, g = rng.uniform(-lim, lim, 3)
            r = euler_to_rotation(EulerAngles(a, b, g))
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(r) - 1.0) < 1e-9
            e = rotation_to_euler(r)
            assert max(abs(e.alpha - a), abs(e.beta - b), abs(e.gamma - g)) < 1e-9


class TestPoseStats:
    def test_two_identical_poses_floor_std(self):
        p = make_pose([0.1, 0.2, 0.3, 1.0, 2.0, 3.0])
        stats = compute_pose_stats([p, p], clamp_width=3.0)
        assert np.allclose(stats.mean_array(), p.as_array())
        assert np.all(stats.std_array() == 1e-6)

    def test_alternating_deviation_gives_std(self):
        base = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        delta = np.array([0.1, 0.2, 0.05, 0.3, 0.4, 0.01])
        poses = [make_pose(base + delta), make_pose(base - delta)] * 4
        stats = compute_pose_stats(poses)
        assert np.allclose(stats.mean_array(), base, atol=1e-12)
        assert np.allclose(stats.std_array(), delta, atol=1e-12)

    def test_too_few_poses(self):
        with pytest.raises(EmptySequence):
            compute_pose_stats([make_pose([0, 0, 0, 0, 0, 0])])


class TestOffsets:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.poses = [make_pose(rng.normal(0, 0.1, 6)) for _ in range(32)]
        self.stats = compute_pose_stats(self.poses, clamp_width=3.0)

    def test_mean_pose_maps_to_zero(self):
        mean = Pose.from_array(self.stats.mean_array())
        off = normalize_pose_offset(mean, self.stats)
        assert np.allclose(off.as_array(), 0.0, atol=1e-12)

    def test_one_std_maps_to_one(self):
        v = self.stats.mean_array().copy()
        v[0] += self.stats.std_array()[0]
        off = normalize_pose_offset(Pose.from_array(v), self.stats)
        assert abs(off.off_e[0] - 1.0) < 1e-12
        assert np.allclose(off.as_array()[1:], 0.0, atol=1e-12)

    def test_clamp(self):
        v = self.stats.mean_array().copy()
        v[2] += 10.0 * self.stats.std_array()[2]
        off = normalize_pose_offset(Pose.from_array(v), self.stats)
        assert off.off_e[2] == 3.0

    def test_zero_offset_denormalizes_to_mean(self):
        p = denormalize_pose_offset(PoseOffset(np.zeros(3), np.zeros(3)), self.stats)
        assert np.allclose(p.as_array(), self.stats.mean_array(), atol=1e-12)

    def test_unit_offset_on_alpha(self):
        p = denormalize_pose_offset(PoseOffset(np.array([1.0, 0, 0]), np.zeros(3)), self.stats)
        expected = self.stats.mean_array().copy()
        expected[0] += self.stats.std_array()[0]
        assert np.allclose(p.as_array(), expected, atol=1e-12)

    @given(st.lists(st.floats(-2.9, 2.9), min_size=6, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_in_clamp_region(self, off_vals):
        off = PoseOffset.from_array(np.array(off_vals))
        pose = denormalize_pose_offset(off, self.stats)
        back = normalize_pose_offset(pose, self.stats)
        assert np.abs(back.as_array() - off.as_array()).max() < 1e-9

    def test_clamping_idempotent(self):
        off = PoseOffset.from_array(np.array([5.0, -7.0, 2.0, 0.5, -4.0, 3.5]))
        clamped = normalize_pose_offset(denormalize_pose_offset(
            PoseOffset.from_array(np.clip(off.as_array(), -3, 3)), self.stats), self.stats)
        again = normalize_pose_offset(denormalize_pose_offset(clamped, self.stats), self.stats)
        assert np.allclose(clamped.as_array(), again.as_array(), atol=1e-12)


def test_pose_track_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    poses = [make_pose(rng.normal(0, 0.2, 6)) for _ in range(10)]
    path = tmp_path / "pose.csv"
    write_pose_track(path, poses)
    text = path.read_text().splitlines()
    assert text[0] == "frame,alpha,beta,gamma,x,y,z"
    back = read_pose_track(path)
    assert len(back) == 10
    for a, b in zip(poses, back):
        assert np.array_equal(a.as_array(), b.as_array())
