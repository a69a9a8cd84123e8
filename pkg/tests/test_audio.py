"""Front-end contracts: framing geometry, spectra, mel filters, WAV I/O."""

from __future__ import annotations

import wave as wave_module

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsvadlab.audio import (
    AudioFormatError,
    FFT_SIZE,
    FrameSpec,
    LOG_FLOOR,
    SAMPLE_RATE,
    Waveform,
    build_mel_filterbank,
    frame_count,
    hann_window,
    hz_to_mel,
    log_mel,
    mel_to_hz,
    power_spectrum,
    read_wav,
    write_wav,
)


class TestFrameCount:
    def test_exactly_one_frame(self):
        assert frame_count(400) == 1

    def test_shorter_than_one_frame(self):
        assert frame_count(399) == 0

    def test_one_second(self):
        # floor((16000 - 400) / 160) + 1 = 98
        assert frame_count(16000) == 98

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            frame_count(-1)

    @given(st.integers(min_value=0, max_value=200_000))
    @settings(max_examples=200, deadline=None)
    def test_monotone_and_shift_increments(self, t):
        n = frame_count(t)
        assert frame_count(t + 1) >= n
        if t >= 400:
            assert frame_count(t + 160) == n + 1


class TestHannWindow:
    def test_zero_at_origin(self):
        assert hann_window(400)[0] == 0.0

    def test_one_at_midpoint(self):
        assert hann_window(400)[200] == 1.0

    def test_symmetry(self):
        w = hann_window(400)
        for t in range(1, 400):
            assert w[t] == pytest.approx(w[400 - t], abs=1e-15)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            hann_window(1)


class TestPowerSpectrum:
    def test_zero_frame(self):
        assert np.array_equal(power_spectrum(np.zeros(400), 512), np.zeros(257))

    def test_constant_frame_is_dc_only(self):
        c = 0.3
        spec = power_spectrum(np.full(512, c), 512)
        assert spec[0] == pytest.approx((512 * c) ** 2, rel=1e-12)
        assert np.all(spec[1:] <= spec[0] * 1e-20)

    def test_sine_peak_bin_matches_dft_oracle(self):
        t = np.arange(400)
        frame = np.sin(2 * np.pi * 1000.0 * t / SAMPLE_RATE) * hann_window(400)
        spec = power_spectrum(frame, 512)
        assert int(np.argmax(spec)) == round(1000 * 512 / SAMPLE_RATE) == 32

        # brute-force DFT oracle
        padded = np.concatenate([frame, np.zeros(112)])
        k = np.arange(257)
        angular = -2j * np.pi * np.outer(k, np.arange(512)) / 512
        oracle = np.abs(np.exp(angular) @ padded) ** 2
        np.testing.assert_allclose(spec, oracle, rtol=1e-9, atol=1e-12)

    def test_fft_size_validation(self):
        with pytest.raises(ValueError):
            power_spectrum(np.zeros(400), 256)
        with pytest.raises(ValueError):
            power_spectrum(np.zeros(400), 500)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_parseval(self, seed):
        frame = np.random.default_rng(seed).normal(size=400) * hann_window(400)
        spec = power_spectrum(frame, 512)
        full_spectrum_energy = spec[0] + spec[256] + 2 * spec[1:256].sum()
        assert full_spectrum_energy == pytest.approx(
            512 * (frame**2).sum(), rel=1e-9
        )


class TestMelFilterbank:
    def test_shape(self):
        fb = build_mel_filterbank(40, 512, 16000)
        assert fb.weights.shape == (40, 257)

    def test_every_filter_peaks_positive(self):
        fb = build_mel_filterbank()
        assert np.all(fb.weights.max(axis=1) > 0)

    def test_centers_strictly_increasing_and_match_formula(self):
        fb = build_mel_filterbank(40, 512, 16000, low_hz=0.0, high_hz=8000.0)
        edges = 700.0 * (
            10.0 ** (np.linspace(hz_to_mel(0.0), hz_to_mel(8000.0), 42) / 2595.0) - 1.0
        )
        np.testing.assert_allclose(fb.center_hz, edges[1:-1], rtol=1e-12)
        assert np.all(np.diff(fb.center_hz) > 0)

    def test_interior_bins_covered(self):
        fb = build_mel_filterbank()
        bin_hz = np.arange(257) * SAMPLE_RATE / 512
        interior = (bin_hz > fb.low_hz) & (bin_hz < fb.high_hz)
        assert np.all(fb.weights.sum(axis=0)[interior] > 0)

    def test_contiguous_support(self):
        fb = build_mel_filterbank()
        for row in fb.weights:
            nonzero = np.flatnonzero(row)
            assert np.array_equal(nonzero, np.arange(nonzero[0], nonzero[-1] + 1))

    def test_edge_validation(self):
        with pytest.raises(ValueError):
            build_mel_filterbank(low_hz=4000, high_hz=1000)
        with pytest.raises(ValueError):
            build_mel_filterbank(high_hz=9000)

    def test_mel_roundtrip(self):
        f = np.array([0.0, 440.0, 8000.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-12)


class TestLogMel:
    def test_silence_hits_floor(self):
        feats = log_mel(Waveform(np.zeros(16000)))
        assert np.all(feats.values == np.log(LOG_FLOOR))

    def test_one_second_shape(self):
        rng = np.random.default_rng(0)
        feats = log_mel(Waveform(rng.normal(size=16000) * 0.1))
        assert feats.values.shape == (98, 40)

    def test_amplitude_doubling_shifts_by_log4(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=8000) * 0.2  # loud enough that nothing floors
        a = log_mel(Waveform(x)).values
        b = log_mel(Waveform(2 * x)).values
        assert a.min() > np.log(LOG_FLOOR)
        np.testing.assert_allclose(b - a, np.log(4.0), rtol=0, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        w = Waveform(rng.normal(size=16000) * 0.1)
        assert np.array_equal(log_mel(w).values, log_mel(w).values)

    def test_frame_locality(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=16000) * 0.1
        full = log_mel(Waveform(x)).values
        n = 40
        zeroed = x.copy()
        zeroed[n * 160 + 400 :] = 0.0  # frames 0..n untouched
        assert np.array_equal(log_mel(Waveform(zeroed)).values[: n + 1], full[: n + 1])

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            log_mel(Waveform(np.zeros(399)))


class TestWaveformValidation:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]))

    def test_rejects_wrong_rate(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(10), sample_rate=8000)


class TestWavIO:
    def test_roundtrip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.5, 0.5, 8000)
        path = tmp_path / "x.wav"
        write_wav(path, Waveform(x))
        back = read_wav(path)
        np.testing.assert_allclose(back.samples, x, atol=1.0 / 32768)

    def test_roundtrip_exact_for_quantized_values(self, tmp_path):
        rng = np.random.default_rng(5)
        x = np.rint(rng.uniform(-0.9, 0.9, 4000) * 32767) / 32768.0
        path = tmp_path / "q.wav"
        write_wav(path, Waveform(x))
        assert np.array_equal(read_wav(path).samples, x)

    def _write_raw(self, path, rate, channels, width):
        with wave_module.open(str(path), "wb") as f:
            f.setnchannels(channels)
            f.setsampwidth(width)
            f.setframerate(rate)
            f.writeframes(b"\x00" * 64 * channels * width)

    def test_rejects_wrong_rate(self, tmp_path):
        path = tmp_path / "bad_rate.wav"
        self._write_raw(path, 8000, 1, 2)
        with pytest.raises(AudioFormatError, match="8000"):
            read_wav(path)

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / "stereo.wav"
        self._write_raw(path, 16000, 2, 2)
        with pytest.raises(AudioFormatError, match="channels"):
            read_wav(path)

    def test_rejects_wrong_width(self, tmp_path):
        path = tmp_path / "w8.wav"
        self._write_raw(path, 16000, 1, 1)
        with pytest.raises(AudioFormatError, match="8-bit"):
            read_wav(path)


class TestFrameSpec:
    def test_geometry_validated(self):
        with pytest.raises(ValueError):
            FrameSpec(frame_length=160, frame_shift=400)

    def test_window_length_validated(self):
        with pytest.raises(ValueError):
            FrameSpec(window=np.ones(10))

    def test_window_range_validated(self):
        with pytest.raises(ValueError):
            FrameSpec(window=np.full(400, 1.5))
