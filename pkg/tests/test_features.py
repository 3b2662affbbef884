"""Waveform handling, mel spectrogram extraction, standardization."""

import wave

import numpy as np
import pytest

from tempsed.features import (
    HOP_SIZE,
    LOG_EPS,
    MEL_BINS,
    SAMPLE_RATE,
    STD_FLOOR,
    WINDOW_SIZE,
    SpectralMap,
    StandardizationStats,
    Waveform,
    fit_standardization,
    frame_count,
    log_mel,
    mel_filterbank,
    parse_stats,
    peak_normalize,
    read_wav,
    resample_linear,
    serialize_stats,
    standardize,
)


class TestWaveform:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]), SAMPLE_RATE)

    def test_peak_normalize(self):
        w = Waveform(np.array([0.1, -0.5, 0.25]), SAMPLE_RATE)
        assert np.abs(peak_normalize(w).samples).max() == 1.0

    def test_peak_normalize_silence_unchanged(self):
        w = Waveform(np.zeros(16), SAMPLE_RATE)
        assert peak_normalize(w).samples.max() == 0.0

    def test_resample_changes_rate_and_length(self):
        w = Waveform(np.sin(np.linspace(0, 20, 44100)), 44100.0)
        r = resample_linear(w, SAMPLE_RATE)
        assert r.sample_rate == SAMPLE_RATE
        assert abs(len(r.samples) - 22050) <= 1

    def test_resample_identity_at_same_rate(self):
        w = Waveform(np.sin(np.linspace(0, 5, 1000)), SAMPLE_RATE)
        np.testing.assert_allclose(resample_linear(w).samples, w.samples, atol=1e-12)


class TestFrameCount:
    def test_ten_seconds_gives_608(self):
        assert frame_count(220500) == 608

    def test_formula(self):
        for n in (1, 362, 363, 364, 2 * 363, 100_000):
            assert frame_count(n) == n // HOP_SIZE + 1


class TestMelFilterbank:
    def test_shape_and_finiteness(self):
        fb = mel_filterbank()
        assert fb.shape == (MEL_BINS, WINDOW_SIZE // 2 + 1)
        assert np.isfinite(fb).all() and (fb >= 0).all()

    def test_every_filter_has_support(self):
        fb = mel_filterbank()
        assert (fb.sum(axis=1) > 0).all()

    def test_area_normalization_scales_inverse_to_width(self):
        """Each triangle's weight sum times its half-width is ~constant in
        mel space; in linear space wider (higher) filters have smaller peaks."""
        fb = mel_filterbank()
        peaks = fb.max(axis=1)
        assert peaks[0] > peaks[-1]


class TestLogMel:
    def _clip(self, seconds=1.0, value=0.0):
        n = int(SAMPLE_RATE * seconds)
        return Waveform(np.full(n, value), SAMPLE_RATE)

    def test_ten_second_clip_shape(self):
        w = Waveform(np.zeros(220500), SAMPLE_RATE)
        m = log_mel(w)
        assert m.frames.shape == (608, MEL_BINS)

    def test_silence_is_constant_log_eps(self):
        m = log_mel(self._clip())
        np.testing.assert_array_equal(m.frames, np.log(LOG_EPS))

    def test_rejects_wrong_rate(self):
        with pytest.raises(ValueError):
            log_mel(Waveform(np.zeros(1000), 16000.0))

    def test_energy_shows_up(self):
        rng = np.random.default_rng(0)
        w = Waveform(rng.uniform(-1, 1, 22050), SAMPLE_RATE)
        m = log_mel(w)
        assert m.frames.mean() > np.log(LOG_EPS)


class TestStandardization:
    def test_fit_then_standardize_zero_mean_unit_std(self):
        rng = np.random.default_rng(1)
        maps = [rng.normal(3.0, 2.0, (50, 8)) for _ in range(5)]
        stats = fit_standardization(maps)
        z = np.concatenate([standardize(m, stats) for m in maps])
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)

    def test_constant_bin_hits_floor(self):
        maps = [np.ones((10, 3)) * 4.0]
        stats = fit_standardization(maps)
        assert (stats.std == STD_FLOOR).all()
        np.testing.assert_array_equal(standardize(maps[0], stats), 0.0)

    def test_accepts_spectral_maps(self):
        m = SpectralMap(np.random.default_rng(2).random((20, MEL_BINS)), 363 / SAMPLE_RATE)
        stats = fit_standardization([m])
        assert stats.mean.shape == (MEL_BINS,)

    def test_stats_round_trip_exact(self):
        rng = np.random.default_rng(3)
        stats = StandardizationStats(rng.normal(size=16), rng.uniform(0.5, 2.0, 16))
        back = parse_stats(serialize_stats(stats))
        np.testing.assert_array_equal(back.mean, stats.mean)
        np.testing.assert_array_equal(back.std, stats.std)


class TestReadWav:
    def test_reads_mono_pcm16(self, tmp_path):
        path = tmp_path / "t.wav"
        samples = (np.sin(np.linspace(0, 40, 4410)) * 20000).astype(np.int16)
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(SAMPLE_RATE)
            f.writeframes(samples.tobytes())
        w = read_wav(path)
        assert w.sample_rate == SAMPLE_RATE
        np.testing.assert_allclose(w.samples, samples / 32768.0, atol=1e-9)

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / "s.wav"
        with wave.open(str(path), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(SAMPLE_RATE)
            f.writeframes(b"\x00\x00\x00\x00" * 10)
        with pytest.raises(ValueError):
            read_wav(path)
