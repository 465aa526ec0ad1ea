import numpy as np
import pytest

from syncanim.dataset import RigGeometry
from syncanim.errors import DegenerateEye, LengthMismatch, ShapeMismatch, TooShort
from syncanim.metrics import (
    count_blinks,
    ear,
    ear_error_and_blinks,
    head_motion_diversity,
    landmark_distance,
    psnr,
    ssim,
    ssim_components,
)
from syncanim.posemath import EulerAngles, Pose, Translation


def rand_img(seed, shape=(32, 32, 3)):
    return np.random.default_rng(seed).uniform(size=shape)


class TestPSNR:
    def test_identical_capped(self):
        img = rand_img(0)
        assert psnr(img, img) == 99.0

    def test_uniform_diff(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_symmetric(self):
        a, b = rand_img(1), rand_img(2)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_brute_force_oracle(self):
        a, b = rand_img(3), rand_img(4)
        mse = 0.0
        for i in range(32):
            for j in range(32):
                for c in range(3):
                    mse += (a[i, j, c] - b[i, j, c]) ** 2
        mse /= 32 * 32 * 3
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def _gaussian_kernel_1d(sigma=1.5, truncate=3.5):
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def brute_force_ssim(a, b, sigma=1.5, truncate=3.5, k1=0.01, k2=0.03):
    """Loop-based single-channel SSIM oracle with explicit reflect padding."""
    r = int(truncate * sigma + 0.5)
    k = _gaussian_kernel_1d(sigma, truncate)
    kern = np.outer(k, k)
    ap = np.pad(a, r, mode="reflect")
    bp = np.pad(b, r, mode="reflect")
    h, w = a.shape
    ua = np.empty((h, w))
    ub = np.empty((h, w))
    uaa = np.empty((h, w))
    ubb = np.empty((h, w))
    uab = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            wa = ap[i : i + 2 * r + 1, j : j + 2 * r + 1]
            wb = bp[i : i + 2 * r + 1, j : j + 2 * r + 1]
            ua[i, j] = (kern * wa).sum()
            ub[i, j] = (kern * wb).sum()
            uaa[i, j] = (kern * wa * wa).sum()
            ubb[i, j] = (kern * wb * wb).sum()
            uab[i, j] = (kern * wa * wb).sum()
    va, vb, vab = uaa - ua**2, ubb - ub**2, uab - ua * ub
    c1, c2 = k1**2, k2**2
    s = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua**2 + ub**2 + c1) * (va + vb + c2))
    return float(s[r:-r, r:-r].mean())


class TestSSIM:
    def test_identical_is_one(self):
        img = rand_img(0)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_on_inverted_midgray(self):
        rng = np.random.default_rng(5)
        a = 0.5 + 0.3 * rng.standard_normal((32, 32))
        a = np.clip(a, 0, 1)
        b = 1.0 - a
        assert ssim(a, b) < 0.0

    def test_constant_shift_decomposition(self):
        a = np.full((24, 24), 0.4)
        b = np.full((24, 24), 0.6)
        lum, cs = ssim_components(a, b)
        assert lum < 1.0
        assert cs == pytest.approx(1.0, abs=1e-12)

    def test_brute_force_oracle_agreement(self):
        for seed in range(3):
            a = rand_img(seed, (20, 20))
            b = np.clip(a + rand_img(seed + 10, (20, 20)) * 0.2, 0, 1)
            assert ssim(a, b) == pytest.approx(brute_force_ssim(a, b), abs=1e-9)

    def test_reference_implementation_agreement(self):
        skimage = pytest.importorskip("skimage.metrics")
        for seed in range(5):
            a = rand_img(seed, (28, 28))
            b = np.clip(a + 0.3 * (rand_img(seed + 50, (28, 28)) - 0.5), 0, 1)
            ref = skimage.structural_similarity(
                a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                data_range=1.0,
            )
            assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_reference_psnr_agreement(self):
        skimage = pytest.importorskip("skimage.metrics")
        for seed in range(5):
            a, b = rand_img(seed), rand_img(seed + 30)
            ref = skimage.peak_signal_noise_ratio(a, b, data_range=1.0)
            assert psnr(a, b) == pytest.approx(ref, abs=1e-6)


def eye_points(h=0.3, w=1.0):
    return np.array([
        [-w, 0.0], [-w / 2, -h], [w / 2, -h], [w, 0.0], [w / 2, h], [-w / 2, h],
    ])


class TestEAR:
    def test_closed_eye_zero(self):
        assert ear(eye_points(h=0.0)) == 0.0

    def test_formula_arithmetic(self):
        # verticals 0.3 and 0.3, horizontal 1 -> wait: |p1-p4| = 2w
        pts = eye_points(h=0.15, w=0.5)
        assert ear(pts) == pytest.approx(0.3)

    def test_scale_invariance(self):
        pts = eye_points(h=0.2, w=0.7)
        assert ear(pts * 2.0) == pytest.approx(ear(pts), abs=1e-12)

    def test_rotation_invariance(self):
        pts = eye_points(h=0.2, w=0.7)
        th = 0.7
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        assert ear(pts @ rot.T) == pytest.approx(ear(pts), abs=1e-12)

    def test_degenerate(self):
        pts = np.zeros((6, 2))
        with pytest.raises(DegenerateEye):
            ear(pts)


class TestBlinks:
    def test_identical_tracks(self):
        track = np.array([0.3, 0.3, 0.05, 0.05, 0.3, 0.3])
        err, p, g = ear_error_and_blinks(track, track)
        assert err == 0.0 and p == g == 1

    def test_constant_difference(self):
        a = np.full(10, 0.3)
        b = np.full(10, 0.25)
        err, p, g = ear_error_and_blinks(a, b)
        assert err == pytest.approx(0.05)
        assert p == 0 and g == 0

    def test_square_wave_five_closures(self):
        track = np.concatenate([[0.3, 0.3, 0.02, 0.02]] * 5 + [[0.3]])
        assert count_blinks(track) == 5

    def test_reversal_invariance(self):
        rng = np.random.default_rng(0)
        track = np.where(rng.uniform(size=50) < 0.2, 0.02, 0.3)
        assert count_blinks(track) == count_blinks(track[::-1])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ear_error_and_blinks(np.zeros(5), np.zeros(6))


class TestDiversity:
    def test_constant_track_zero(self):
        assert head_motion_diversity(np.full((20, 3), 0.5)) == 0.0

    def test_alternating_single_axis(self):
        track = np.zeros((20, 3))
        track[::2, 0] = np.radians(1.0)
        track[1::2, 0] = -np.radians(1.0)
        assert head_motion_diversity(track) == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_too_short(self):
        with pytest.raises(TooShort):
            head_motion_diversity(np.zeros((1, 3)))


class TestLMD:
    def setup_method(self):
        self.rig = RigGeometry()
        self.res = 64
        self.blend = np.tile(np.full(7, 0.25), (5, 1))
        self.poses = [Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0))] * 5

    def test_identical_zero(self):
        d = landmark_distance((self.poses, self.blend), (self.poses, self.blend),
                              self.rig, self.res)
        assert d == 0.0

    def test_rigid_shift_two_pixels(self):
        shifted = [Pose(EulerAngles(0, 0, 0), Translation(2.0 / self.res, 0, 0))] * 5
        d = landmark_distance((shifted, self.blend), (self.poses, self.blend),
                              self.rig, self.res)
        assert d == pytest.approx(2.0, abs=1e-9)

    def test_monotone_in_pose_error(self):
        dists = []
        for mag in (0.0, 0.01, 0.02, 0.04):
            pred = [Pose(EulerAngles(mag, 0, 0), Translation(0, 0, 0))] * 5
            dists.append(landmark_distance((pred, self.blend), (self.poses, self.blend),
                                           self.rig, self.res))
        assert all(dists[i] <= dists[i + 1] + 1e-12 for i in range(3))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            landmark_distance((self.poses[:3], self.blend[:3]), (self.poses, self.blend),
                              self.rig, self.res)
