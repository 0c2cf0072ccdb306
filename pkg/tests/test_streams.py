import numpy as np
import pytest

from avaffect import network, streams


class TestWindowAudio:
    def test_adjacent_windows_share_882_samples(self):
        samples = np.arange(10 * streams.AUDIO_HOP, dtype=np.float32)
        wins = streams.window_audio(samples, 8)
        for i in range(7):
            np.testing.assert_array_equal(
                wins[i, streams.AUDIO_HOP :], wins[i + 1, : streams.AUDIO_OVERLAP]
            )
        assert streams.AUDIO_OVERLAP == 882

    def test_constant_signal(self):
        wins = streams.window_audio(np.full(20000, 0.25, np.float32), 4)
        assert np.all(wins == np.float32(0.25))

    def test_exact_fit_no_padding(self):
        samples = np.linspace(-1, 1, streams.AUDIO_WINDOW).astype(np.float32)
        wins = streams.window_audio(samples, 1)
        assert wins.shape == (1, streams.AUDIO_WINDOW)
        np.testing.assert_array_equal(wins[0], samples)

    def test_trailing_shortfall_zero_padded(self):
        samples = np.ones(streams.AUDIO_HOP + 100, np.float32)
        wins = streams.window_audio(samples, 2)
        assert np.all(wins[1, 100:] == 0)
        assert np.all(wins[1, :100] == 1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            streams.window_audio(np.array([]), 1)

    def test_window_starts_follow_hop_arithmetic(self):
        samples = np.arange(6 * streams.AUDIO_HOP, dtype=np.float32)
        wins = streams.window_audio(samples, 4)
        for i in range(4):
            assert wins[i, 0] == np.float32(i * streams.AUDIO_HOP)


class TestStreamConfigs:
    def test_paper_scale_video_shapes(self):
        shapes = network.infer_shapes(streams.video_layers(1.0), (1, 128, 128))
        # conv 124 -> pool 62 -> conv 58 -> pool 29
        assert shapes[0] == (128, 124, 124)
        assert shapes[2] == (128, 62, 62)
        assert shapes[4] == (256, 58, 58)
        assert shapes[6] == (256, 29, 29)
        assert int(np.prod(shapes[6])) == 215296
        assert shapes[7] == (512,)
        assert shapes[-1] == (1,)

    def test_paper_scale_audio_shapes(self):
        shapes = network.infer_shapes(streams.audio_layers(1.0), (1, streams.AUDIO_WINDOW))
        assert shapes[0] == (32, 1314)
        assert shapes[2] == (32, 657)
        assert shapes[4] == (64, 319)
        assert shapes[6] == (64, 159)
        assert int(np.prod(shapes[6])) == 10176
        assert shapes[7] == (512,)

    def test_desk_scale_models_run_end_to_end(self):
        video, audio = streams.build_stream_models(scale=0.25, seed=3)
        assert video.feature_width == 128 and audio.feature_width == 128
        assert streams.stage3_flat_size(video) == 64 * 5 * 5
        assert streams.stage3_flat_size(audio) == 16 * 159
        rec = streams.FrameRecord(
            index=0,
            video=np.random.default_rng(0).random((32, 32), dtype=np.float32),
            audio=np.zeros(streams.AUDIO_WINDOW, np.float32),
            rating=0.2,
        )
        rec.validate()
        pv, _ = network.predict(video, rec.video[None, None])
        pa, _ = network.predict(audio, rec.audio[None, None])
        assert pv.shape == (1,) and pa.shape == (1,)

    def test_frame_record_validation(self):
        bad = streams.FrameRecord(
            index=3, video=np.zeros((4, 4), np.float32),
            audio=np.zeros(10, np.float32), rating=0.0,
        )
        with pytest.raises(ValueError, match="frame 3"):
            bad.validate()
        out_of_range = streams.FrameRecord(
            index=0, video=np.zeros((4, 4), np.float32),
            audio=np.zeros(streams.AUDIO_WINDOW, np.float32), rating=1.5,
        )
        with pytest.raises(ValueError, match="rating"):
            out_of_range.validate()


class TestConcatFeatures:
    def test_widths_add(self, rng):
        v = rng.normal(size=(5, 512)).astype(np.float32)
        a = rng.normal(size=(5, 512)).astype(np.float32)
        out = streams.concat_features(v, a)
        assert out.shape == (5, 1024)
        np.testing.assert_array_equal(out[:, :512], v)
        np.testing.assert_array_equal(out[:, 512:], a)

    def test_zero_audio_block(self, rng):
        v = rng.normal(size=(3, 512)).astype(np.float32)
        out = streams.concat_features(v, np.zeros((3, 512), np.float32))
        assert not out[:, 512:].any()

    def test_empty_frame_count_keeps_columns(self):
        out = streams.concat_features(np.zeros((0, 512)), np.zeros((0, 512)))
        assert out.shape == (0, 1024)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            streams.concat_features(np.zeros((2, 4)), np.zeros((3, 4)))

    def test_positions_are_a_bijection(self, rng):
        v = rng.permutation(np.arange(12.0)).reshape(3, 4)
        a = rng.permutation(np.arange(12.0, 24.0)).reshape(3, 4)
        out = streams.concat_features(v, a)
        assert sorted(out.ravel().tolist()) == sorted(
            np.concatenate([v.ravel(), a.ravel()]).tolist()
        )
