"""Waveform containers and the log Mel-filterbank front end.

All operations here are pure and deterministic: identical inputs produce
bit-identical outputs, and frame n of the feature matrix depends only on
samples [n*shift, n*shift + length).
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_LENGTH = 400   # 25 ms at 16 kHz
FRAME_SHIFT = 160    # 10 ms at 16 kHz
N_MELS = 40
FFT_SIZE = 512       # next power of two >= FRAME_LENGTH
LOG_FLOOR = 1e-10


class AudioFormatError(ValueError):
    """Raised for WAV files that are not mono 16 kHz PCM16."""


@dataclass(frozen=True)
class Waveform:
    """Mono sample sequence at 16 kHz.

    Samples are dimensionless amplitudes, nominally in [-1, 1], and must be
    finite. The same container carries clean speech, non-target speech and
    noise; the role is decided by the caller.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected a 1-D sample array, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window w[t] = 0.5 * (1 - cos(2*pi*t / length))."""
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    t = np.arange(length, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / length))


@dataclass(frozen=True)
class FrameSpec:
    """Framing geometry: window length, hop and per-sample window weights."""

    frame_length: int = FRAME_LENGTH
    frame_shift: int = FRAME_SHIFT
    window: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not self.frame_length > self.frame_shift > 0:
            raise ValueError(
                f"need frame_length > frame_shift > 0, got "
                f"({self.frame_length}, {self.frame_shift})"
            )
        window = self.window
        if window is None:
            window = hann_window(self.frame_length)
        window = np.asarray(window, dtype=np.float64)
        if len(window) != self.frame_length:
            raise ValueError(
                f"window length {len(window)} != frame_length {self.frame_length}"
            )
        if window.min() < 0.0 or window.max() > 1.0:
            raise ValueError("window values must lie in [0, 1]")
        object.__setattr__(self, "window", window)


def frame_count(total_samples: int, spec: FrameSpec = FrameSpec()) -> int:
    """Number of full analysis frames in a signal of ``total_samples``.

    Returns floor((T - L) / M) + 1 for T >= L, else 0.
    """
    if total_samples < 0:
        raise ValueError(f"total_samples must be >= 0, got {total_samples}")
    if total_samples < spec.frame_length:
        return 0
    return (total_samples - spec.frame_length) // spec.frame_shift + 1


def power_spectrum(frame: np.ndarray, fft_size: int = FFT_SIZE) -> np.ndarray:
    """Squared-magnitude DFT of a zero-padded frame, bins 0..fft_size/2."""
    frame = np.asarray(frame, dtype=np.float64)
    if fft_size < len(frame):
        raise ValueError(f"fft_size {fft_size} < frame length {len(frame)}")
    if fft_size & (fft_size - 1) != 0:
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    spectrum = np.fft.rfft(frame, n=fft_size)
    return (spectrum.real**2 + spectrum.imag**2).astype(np.float64)


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    """HTK mel scale: m = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters evaluated on FFT bin frequencies."""

    weights: np.ndarray          # (n_mels, fft_size // 2 + 1)
    fft_size: int
    low_hz: float
    high_hz: float
    center_hz: np.ndarray        # (n_mels,) triangle apex frequencies


def build_mel_filterbank(
    n_mels: int = N_MELS,
    fft_size: int = FFT_SIZE,
    sr: int = SAMPLE_RATE,
    low_hz: float = 0.0,
    high_hz: float = SAMPLE_RATE / 2,
) -> MelFilterbank:
    """Build ``n_mels`` triangular filters with edges uniformly spaced in mel."""
    if not 0 <= low_hz < high_hz <= sr / 2:
        raise ValueError(
            f"need 0 <= low_hz < high_hz <= sr/2, got ({low_hz}, {high_hz}) at sr={sr}"
        )
    edges_mel = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2)
    edges_hz = np.asarray(mel_to_hz(edges_mel))
    bin_hz = np.arange(fft_size // 2 + 1, dtype=np.float64) * sr / fft_size

    weights = np.zeros((n_mels, fft_size // 2 + 1))
    for m in range(n_mels):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(
        weights=weights,
        fft_size=fft_size,
        low_hz=float(low_hz),
        high_hz=float(high_hz),
        center_hz=edges_hz[1:-1].copy(),
    )


@dataclass(frozen=True)
class LogMelFrames:
    """N x 40 matrix of log Mel-filterbank features, frame-aligned to labels."""

    values: np.ndarray
    frame_spec: FrameSpec
    origin_sample_rate: int = SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


_DEFAULT_SPEC = FrameSpec()
_DEFAULT_FB = build_mel_filterbank()


def log_mel(
    wave: Waveform,
    spec: FrameSpec = _DEFAULT_SPEC,
    fb: MelFilterbank = _DEFAULT_FB,
) -> LogMelFrames:
    """Natural-log mel-filterbank energies per frame.

    values[n] = ln(max(fb @ |DFT(windowed frame n)|^2, 1e-10)). Single-frame
    features: no left or right context is stacked.
    """
    n = frame_count(wave.n_samples, spec)
    if n == 0:
        raise ValueError(
            f"waveform of {wave.n_samples} samples is shorter than one "
            f"frame ({spec.frame_length} samples)"
        )
    idx = (
        np.arange(n)[:, None] * spec.frame_shift + np.arange(spec.frame_length)[None, :]
    )
    frames = wave.samples[idx] * spec.window[None, :]
    spectra = np.fft.rfft(frames, n=fb.fft_size, axis=1)
    power = spectra.real**2 + spectra.imag**2
    mel_energy = power @ fb.weights.T
    values = np.log(np.maximum(mel_energy, LOG_FLOOR))
    return LogMelFrames(values=values, frame_spec=spec, origin_sample_rate=wave.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16 kHz PCM16 RIFF WAV file.

    Rejects other sample rates, channel counts or sample widths with a
    diagnostic naming the offending property.
    """
    with _wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise AudioFormatError(
                f"{path}: expected mono audio, got {f.getnchannels()} channels"
            )
        if f.getframerate() != SAMPLE_RATE:
            raise AudioFormatError(
                f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()} Hz"
            )
        if f.getsampwidth() != 2:
            raise AudioFormatError(
                f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit"
            )
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples)


def write_wav(path: str | Path, wave_: Waveform) -> None:
    """Write a waveform as mono 16 kHz PCM16, clipping to the int16 range.

    Symmetric with `read_wav` (scale 32768 both ways), so any value of the
    form k/32768 survives a write/read round trip exactly.
    """
    quantized = np.clip(np.rint(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave_.sample_rate)
        f.writeframes(quantized.tobytes())
