import numpy as np
import pytest

from syncanim.audio2emotion import DEFAULT_BLENDSHAPE_NAMES, BlendshapeVector
from syncanim.dataset import (
    DatasetBundle,
    RigGeometry,
    SyntheticSceneConfig,
    analytic_landmarks,
    blink_value,
    generate_synthetic_dataset,
    load_dataset,
    render_rig_frame,
    save_dataset,
)
from syncanim.errors import ConfigInvalid, LengthMismatch, MissingFile, StatsMismatch
from syncanim.metrics import ear, ear_track_from_params
from syncanim.posemath import EulerAngles, Pose, Translation, compute_pose_stats

BS = {name: i for i, name in enumerate(DEFAULT_BLENDSHAPE_NAMES)}


def small_cfg(**kw):
    base = dict(n_train=40, n_eval=20, resolution=48, seed=5)
    base.update(kw)
    return SyntheticSceneConfig(**base)


@pytest.fixture(scope="module")
def bundle():
    return generate_synthetic_dataset(small_cfg())


class TestConfig:
    def test_blink_period_positive(self):
        with pytest.raises(ConfigInvalid):
            small_cfg(blink_period=0.0).validate()

    def test_lock_guard_amplitude(self):
        with pytest.raises(ConfigInvalid):
            small_cfg(pose_amplitude=(0.05, 0.05, 0.5, 0.01, 0.01, 0.01)).validate()

    def test_silence_window_bounds(self):
        with pytest.raises(ConfigInvalid):
            small_cfg(silence_windows=((0.5, 0.4),)).validate()


class TestBlinkSchedule:
    def test_peak_at_center(self):
        assert blink_value(1.0, 2.0, 0.28) == 1.0
        assert blink_value(3.0, 2.0, 0.28) == 1.0

    def test_zero_away_from_center(self):
        assert blink_value(0.0, 2.0, 0.28) == 0.0
        assert blink_value(1.9, 2.0, 0.28) == 0.0

    def test_exact_event_count_over_20s(self):
        fps = 25.0
        t = np.arange(int(20 * fps)) / fps
        blink = np.array([blink_value(tt, 2.0, 0.28) for tt in t])
        closures = (blink > 0.733).astype(int)  # EAR < 0.1 equivalent
        events = int(np.sum(closures[1:] & ~closures[:-1]) + closures[0])
        assert events == 10


class TestGeneration:
    def test_deterministic_bundle(self, tmp_path):
        a = generate_synthetic_dataset(small_cfg())
        b = generate_synthetic_dataset(small_cfg())
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.blendshapes, b.blendshapes)
        assert np.array_equal(a.features.frames, b.features.frames)
        save_dataset(a, tmp_path / "one")
        save_dataset(b, tmp_path / "two")
        for rel in ("manifest.txt", "pose.csv", "blendshapes.csv", "features.syaf",
                    "aux.csv", "landmarks.csv", "frames/000000.png"):
            assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes()

    def test_track_lengths_and_split(self, bundle):
        n = bundle.n_frames
        assert n == 60
        assert bundle.n_train == 40
        assert len(bundle.poses) == n
        assert bundle.blendshapes.shape == (n, 7)
        assert len(bundle.features) == n
        assert bundle.silence_mask.shape == (n,)

    def test_silence_span_fraction(self, bundle):
        total = bundle.silence_mask.mean()
        assert total >= 0.2
        sl = bundle.eval_slice()
        assert bundle.silence_mask[sl].any()
        assert (~bundle.silence_mask[sl]).any()

    def test_silence_reduces_motion(self, bundle):
        arr = np.stack([p.as_array() for p in bundle.poses])
        sil = bundle.silence_mask
        # interior silence only (ramp frames are transitional)
        speech_std = arr[~sil].std(axis=0).mean()
        sil_std = arr[sil].std(axis=0).mean()
        assert sil_std < speech_std

    def test_manifest_stats_consistent(self, bundle):
        stats = compute_pose_stats(bundle.poses[: bundle.n_train],
                                   clamp_width=bundle.config.clamp_width)
        recorded = np.array([float(v) for v in bundle.manifest["pose_mean"].split(",")])
        assert np.abs(recorded - stats.mean_array()).max() < 1e-12

    def test_ground_truth_ear_profile(self):
        # blink closures reach EAR < 0.05; open eyes sit above 0.25
        cfg = small_cfg(n_train=100, n_eval=25)
        b = generate_synthetic_dataset(cfg)
        ear_track = ear_track_from_params(b.poses, b.blendshapes, cfg.rig, cfg.resolution)
        assert ear_track.min() < 0.05
        assert np.median(ear_track) > 0.25

    def test_envelope_quantized_alphabet(self, bundle):
        # audible values outside ramps live on the configured level grid
        interior = bundle.envelope[~bundle.silence_mask]
        levels = np.linspace(0, 1, bundle.config.env_levels)
        dist = np.abs(interior[:, None] - levels[None, :]).min(axis=1)
        assert np.quantile(dist, 0.8) < 1e-9


class TestLandmarks:
    def test_canonical_table_at_rest(self, bundle):
        rig = bundle.config.rig
        res = bundle.config.resolution
        pose = Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0))
        blend = np.zeros(7)
        lm = analytic_landmarks(pose, blend, rig, res)
        eye_l = lm.points["eye_l"]
        assert ear(eye_l) == pytest.approx(rig.eye_half_h / rig.eye_half_w)
        center = np.array(rig.head_center) * res
        assert eye_l.mean(axis=0)[0] < center[0]  # left eye left of center

    def test_full_blink_collapses_ear(self, bundle):
        rig = bundle.config.rig
        blend = np.zeros(7)
        blend[BS["blink_left"]] = 1.0
        blend[BS["blink_right"]] = 1.0
        pose = Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0))
        lm = analytic_landmarks(pose, blend, rig, bundle.config.resolution)
        assert ear(lm.points["eye_l"]) == pytest.approx(0.0, abs=1e-12)

    def test_translation_shifts_all_points(self, bundle):
        rig = bundle.config.rig
        res = bundle.config.resolution
        blend = np.full(7, 0.3)
        p0 = Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0))
        shift_units = 2.0 / res  # +2 px in x
        p1 = Pose(EulerAngles(0, 0, 0), Translation(shift_units, 0, 0))
        a = analytic_landmarks(p0, blend, rig, res).stacked()
        b = analytic_landmarks(p1, blend, rig, res).stacked()
        assert np.allclose(b - a, [2.0, 0.0], atol=1e-9)

    def test_landmarks_sit_on_their_features(self, bundle):
        # eye center pixel carries eye color on frames with open eyes
        cfg = bundle.config
        for i in (0, 7, 23):
            if bundle.blendshapes[i, BS["blink_left"]] > 0.3:
                continue
            lm = analytic_landmarks(bundle.poses[i], bundle.blendshapes[i], cfg.rig,
                                    cfg.resolution)
            eye = lm.points["eye_l"]
            cx, cy = eye.mean(axis=0)
            px = bundle.frames[i, int(round(cy)), int(round(cx))]
            assert np.linalg.norm(px - np.array(cfg.rig.eye_color)) < 0.25


class TestSaveLoad:
    def test_round_trip(self, bundle, tmp_path):
        save_dataset(bundle, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert np.array_equal(back.frames, bundle.frames)
        assert np.array_equal(back.blendshapes, bundle.blendshapes)
        assert np.array_equal(back.features.frames, bundle.features.frames)
        assert np.array_equal(back.silence_mask, bundle.silence_mask)
        for a, b in zip(back.poses, bundle.poses):
            assert np.array_equal(a.as_array(), b.as_array())
        assert back.lip_bbox == bundle.lip_bbox
        assert np.array_equal(back.head_region, bundle.head_region)

    def test_missing_frame_detected(self, bundle, tmp_path):
        save_dataset(bundle, tmp_path / "ds")
        (tmp_path / "ds" / "frames" / "000003.png").unlink()
        with pytest.raises(MissingFile):
            load_dataset(tmp_path / "ds")

    def test_row_count_corruption_detected(self, bundle, tmp_path):
        save_dataset(bundle, tmp_path / "ds")
        pose_csv = tmp_path / "ds" / "pose.csv"
        lines = pose_csv.read_text().strip().splitlines()
        pose_csv.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(LengthMismatch):
            load_dataset(tmp_path / "ds")

    def test_stats_corruption_detected(self, bundle, tmp_path):
        save_dataset(bundle, tmp_path / "ds")
        man = tmp_path / "ds" / "manifest.txt"
        lines = []
        for line in man.read_text().splitlines():
            if line.startswith("pose_mean="):
                parts = line.split("=")[1].split(",")
                parts[0] = repr(float(parts[0]) + 0.1)
                line = "pose_mean=" + ",".join(parts)
            lines.append(line)
        man.write_text("\n".join(lines) + "\n")
        with pytest.raises(StatsMismatch):
            load_dataset(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            load_dataset(tmp_path / "nothing")


def test_render_rig_frame_background_and_torso():
    cfg = small_cfg()
    pose = Pose(EulerAngles(0, 0, 0), Translation(0, 0, 0))
    img = render_rig_frame(pose, np.zeros(7), 0.0, cfg)
    assert img.shape == (48, 48, 3)
    assert np.allclose(img[0, 0], cfg.background_color, atol=1e-9)  # corner is background
    assert np.allclose(img[46, 24], cfg.rig.torso_color, atol=0.05)  # bottom center is torso
