import numpy as np
import pytest
import torch

from syncanim.audiofeat import TimeEncoding, WindowedFeatures
from syncanim.audio2emotion import (
    Audio2EmotionConfig,
    Audio2EmotionModel,
    BlendshapeOffset,
    BlendshapeVector,
    ExpressionStats,
    compute_expression_stats,
    denormalize_blendshape,
    expression_training_step,
    infer_expression_offsets,
    load_audio2emotion,
    make_diversity_vector_exp,
    make_stability_vector_exp,
    normalize_blendshape,
    predict_expression_offsets,
    read_blendshape_track,
    save_audio2emotion,
    write_blendshape_track,
)
from syncanim.audio2pose import StabilityConfig
from syncanim.errors import MissingTarget, ShapeMismatch


def tiny_stats(b=7):
    return ExpressionStats(mean_b=np.full(b, 0.3), std_b=np.full(b, 0.15), clamp_width=3.0)


def tiny_model(seed=0, **cfg_kwargs) -> Audio2EmotionModel:
    torch.manual_seed(seed)
    cfg = Audio2EmotionConfig(feat_dim=8, window=2, latent_dim=4, cond_dim=8,
                              time_feat_dim=4, audio_feat_dim=4, conv_width=8,
                              unet_channels=(8, 12), **cfg_kwargs)
    return Audio2EmotionModel(cfg, tiny_stats())


class TestNormalization:
    def test_mean_maps_to_zero(self):
        stats = tiny_stats()
        off = normalize_blendshape(BlendshapeVector(stats.mean_b.copy()), stats)
        assert np.allclose(off.off_b, 0.0, atol=1e-12)

    def test_round_trip_in_range(self):
        stats = tiny_stats()
        b = BlendshapeVector(np.array([0.1, 0.5, 0.3, 0.2, 0.6, 0.4, 0.35]))
        back = denormalize_blendshape(normalize_blendshape(b, stats), stats)
        assert np.allclose(back.b, b.b, atol=1e-12)

    def test_inverse_clips_to_unit_interval(self):
        stats = tiny_stats()
        # +3 sigma on every channel pushes 0.3 + 3*0.15 = 0.75; force beyond 1 via mean
        stats_high = ExpressionStats(mean_b=np.full(7, 0.9), std_b=np.full(7, 0.2))
        v = denormalize_blendshape(BlendshapeOffset(np.full(7, 3.0)), stats_high)
        assert np.all(v.b == 1.0)
        low = denormalize_blendshape(BlendshapeOffset(np.full(7, -30.0)), stats)
        assert np.all(low.b == 0.0)

    def test_invalid_vector_rejected(self):
        with pytest.raises(ValueError):
            BlendshapeVector(np.array([0.5, 1.2, 0.0, 0.0, 0.0, 0.0, 0.0]))

    def test_stats_floor(self):
        tracks = np.tile(np.linspace(0, 1, 7), (5, 1))
        stats = compute_expression_stats(tracks)
        assert np.all(stats.std_b == 1e-6)
        assert np.allclose(stats.mean_b, tracks[0])


class TestStability:
    def test_eval_deterministic(self):
        model = tiny_model()
        off = BlendshapeOffset(np.linspace(-1, 1, 7))
        a = make_stability_vector_exp(off, model, torch.Generator().manual_seed(0), False)
        b = make_stability_vector_exp(off, model, torch.Generator().manual_seed(7), False)
        assert torch.equal(a, b)

    def test_zero_noise_zero_dropout_train_equals_eval(self):
        torch.manual_seed(0)
        cfg = Audio2EmotionConfig(feat_dim=8, window=2, latent_dim=4, cond_dim=8,
                                  time_feat_dim=4, audio_feat_dim=4, conv_width=8,
                                  unet_channels=(8, 12),
                                  stability=StabilityConfig(noise_std=0.0, dropout_rate=0.0))
        model = Audio2EmotionModel(cfg, tiny_stats())
        off = BlendshapeOffset(np.linspace(-1, 1, 7))
        a = make_stability_vector_exp(off, model, torch.Generator().manual_seed(0), True)
        b = make_stability_vector_exp(off, model, torch.Generator().manual_seed(1), False)
        assert torch.allclose(a, b)

    def test_zero_shot_seeds_differ(self):
        model = tiny_model()
        windows = np.zeros((3, 5, 8), dtype=np.float32)
        t_encs = np.zeros((3, 8))
        distinct = 0
        for seed in range(100):
            a = infer_expression_offsets(model, windows, t_encs, "zero-shot",
                                         torch.Generator().manual_seed(seed))
            b = infer_expression_offsets(model, windows, t_encs, "zero-shot",
                                         torch.Generator().manual_seed(seed + 500))
            distinct += int(not np.array_equal(a, b))
        assert distinct >= 99


class TestDiversity:
    def window(self, seed=0):
        rng = np.random.default_rng(seed)
        return WindowedFeatures(stacked=rng.normal(size=(5, 8)).astype(np.float32), n=2)

    def test_sample_mode_reproducible(self):
        model = tiny_model()
        t_enc = TimeEncoding(vec=np.zeros(8))
        a, _ = make_diversity_vector_exp(None, t_enc, self.window(), model,
                                         torch.Generator().manual_seed(2), "sample")
        b, _ = make_diversity_vector_exp(None, t_enc, self.window(), model,
                                         torch.Generator().manual_seed(2), "sample")
        assert torch.equal(a, b)

    def test_train_requires_target(self):
        model = tiny_model()
        with pytest.raises(MissingTarget):
            make_diversity_vector_exp(None, TimeEncoding(vec=np.zeros(8)), self.window(),
                                      model, torch.Generator().manual_seed(0), "train")

    def test_encoder_forced_to_prior(self):
        model = tiny_model()
        with torch.no_grad():
            model.cvae.encoder[-1].weight.zero_()
            model.cvae.encoder[-1].bias.zero_()
        _, kl = make_diversity_vector_exp(np.zeros(7), TimeEncoding(vec=np.zeros(8)),
                                          self.window(), model,
                                          torch.Generator().manual_seed(0), "train")
        assert float(kl) == 0.0

    def test_varies_with_time_encoding(self):
        model = tiny_model()
        w = self.window()
        outs = []
        for tau_phase in np.linspace(0, 2 * np.pi, 5):
            t_enc = TimeEncoding(vec=np.concatenate([
                np.sin([tau_phase] * 4), np.cos([tau_phase] * 4)]))
            d, _ = make_diversity_vector_exp(None, t_enc, w, model,
                                             torch.Generator().manual_seed(0), "sample")
            outs.append(d)
        spread = torch.stack(outs).std(dim=0).max()
        assert float(spread) > 0.0


class TestPredictAndTrain:
    def test_range_bound(self):
        model = tiny_model()
        rng = torch.Generator().manual_seed(0)
        w = WindowedFeatures(stacked=np.full((5, 8), 50.0, dtype=np.float32), n=2)
        d = torch.randn(8, generator=rng)
        s = torch.randn(32, generator=rng)
        off = predict_expression_offsets(w, d, s, model)
        assert np.abs(off.off_b).max() <= model.cfg.clamp_width

    def test_shape_mismatch(self):
        model = tiny_model()
        w = WindowedFeatures(stacked=np.ones((5, 9), dtype=np.float32), n=2)
        with pytest.raises(ShapeMismatch):
            predict_expression_offsets(w, torch.zeros(8), torch.zeros(32), model)

    def test_training_step_losses(self):
        model = tiny_model()
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        g = torch.Generator().manual_seed(0)
        batch = {
            "windows": torch.randn((6, 5, 8), generator=g),
            "target": torch.randn((6, 7), generator=g).clamp(-2.9, 2.9),
            "t_enc": torch.randn((6, 8), generator=g),
        }
        total, kl, reg = expression_training_step(batch, model, opt,
                                                  torch.Generator().manual_seed(0))
        assert np.isfinite([total, kl, reg]).all()
        assert abs(total - (0.1 * kl + reg)) < 1e-6

    def test_lambda_kl_zero(self):
        torch.manual_seed(0)
        cfg = Audio2EmotionConfig(feat_dim=8, window=2, latent_dim=4, cond_dim=8,
                                  time_feat_dim=4, audio_feat_dim=4, conv_width=8,
                                  unet_channels=(8, 12), lambda_kl=0.0)
        model = Audio2EmotionModel(cfg, tiny_stats())
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        g = torch.Generator().manual_seed(0)
        batch = {
            "windows": torch.randn((6, 5, 8), generator=g),
            "target": torch.randn((6, 7), generator=g).clamp(-2.9, 2.9),
            "t_enc": torch.randn((6, 8), generator=g),
        }
        total, kl, reg = expression_training_step(batch, model, opt,
                                                  torch.Generator().manual_seed(0))
        assert total == pytest.approx(reg)


def test_blendshape_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    track = rng.uniform(0, 1, (9, 7))
    path = tmp_path / "bs.csv"
    write_blendshape_track(path, track)
    header = path.read_text().splitlines()[0]
    assert header == "frame," + ",".join(f"bs_{i}" for i in range(7))
    back = read_blendshape_track(path)
    assert np.array_equal(back, track)


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=9)
    path = tmp_path / "a2e.ckpt"
    save_audio2emotion(path, model)
    assert path.read_bytes()[:6] == b"SYA2E\x01"
    back = load_audio2emotion(path)
    for (ka, va), (kb, vb) in zip(model.state_dict().items(), back.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    save_audio2emotion(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
