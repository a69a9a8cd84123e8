"""Synthetic labeled speech, procedural noise, and augmentation.

Stands in for a real multi-speaker corpus at desk scale: speakers are
harmonic-stack voices with per-speaker pitch and spectral envelope, labels
come from the synthesis itself (sample-accurate), and six procedural noise
kinds preserve the seen/unseen split semantics with the cafe analog held
out of training. Everything is reproducible: a manifest plus its master
seed regenerates bit-identical audio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.signal
from jsonschema import validate as _validate_schema

from .audio import (
    FrameSpec,
    SAMPLE_RATE,
    Waveform,
    build_mel_filterbank,
    frame_count,
    write_wav,
)

LABEL_NAMES = ("ns", "ts", "nts")
NS, TS, NTS = 0, 1, 2

NOISE_KINDS = ("babble", "bus", "cafe", "pedestrian", "street", "ssn")
HOLDOUT_NOISE = "cafe"

TRAIN_SNR_RANGE = (-5.0, 20.0)

_SPEC = FrameSpec()


class DegenerateInputError(ValueError):
    """Raised when an all-zero signal makes an operation meaningless."""


# ---------------------------------------------------------------------------
# speaker profiles and speech synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpeakerProfile:
    """Deterministic voice: pitch, 40-band spectral envelope, peak level."""

    speaker_id: str
    f0: float
    formant_gains: np.ndarray  # (40,) envelope sampled at mel-spaced centers
    seed: int
    level: float = 0.25

    def __post_init__(self):
        if not 80.0 <= self.f0 <= 300.0:
            raise ValueError(f"f0 must be in [80, 300] Hz, got {self.f0}")
        gains = np.asarray(self.formant_gains, dtype=np.float64)
        if gains.shape != (40,):
            raise ValueError(f"formant_gains must have shape (40,), got {gains.shape}")
        object.__setattr__(self, "formant_gains", gains)


_ENVELOPE_CENTERS_HZ = build_mel_filterbank().center_hz


def make_profile(speaker_id: str, seed: int) -> SyntheticSpeakerProfile:
    """Sample a speaker voice; resynthesis is deterministic given the seed."""
    rng = np.random.default_rng(seed)
    f0 = float(rng.uniform(80.0, 300.0))
    centers = _ENVELOPE_CENTERS_HZ
    # Spectral tilt plus a few formant-like bumps keeps speakers separable.
    tilt = 1.0 / (1.0 + (centers / rng.uniform(800.0, 2500.0)) ** 2)
    gains = 0.15 * tilt
    for _ in range(int(rng.integers(2, 5))):
        center = rng.uniform(300.0, 3500.0)
        width = rng.uniform(150.0, 600.0)
        gains = gains + rng.uniform(0.4, 1.0) * np.exp(-0.5 * ((centers - center) / width) ** 2)
    gains = gains / gains.max()
    level = float(rng.uniform(0.15, 0.35))
    return SyntheticSpeakerProfile(
        speaker_id=speaker_id, f0=f0, formant_gains=gains, seed=seed, level=level
    )


def _harmonic_segment(profile: SyntheticSpeakerProfile, n: int, rng: np.random.Generator) -> np.ndarray:
    """One voiced span: harmonic stack at (jittered) f0 shaped by the envelope."""
    f0 = profile.f0 * rng.uniform(0.97, 1.03)
    harmonics = np.arange(1, int(7600.0 / f0) + 1)
    freqs = harmonics * f0
    amps = np.interp(freqs, _ENVELOPE_CENTERS_HZ, profile.formant_gains)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(harmonics))
    t = np.arange(n) / SAMPLE_RATE
    sig = (amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    ramp = min(int(0.010 * SAMPLE_RATE), n // 2)
    if ramp > 0:
        fade = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        sig[:ramp] *= fade
        sig[-ramp:] *= fade[::-1]
    peak = np.abs(sig).max()
    if peak > 0:
        sig *= profile.level / peak
    return sig


def frame_speakers_from_samples(sample_speaker: np.ndarray, spec: FrameSpec = _SPEC) -> np.ndarray:
    """Per-frame speaker index by majority of samples; ties go to speech.

    ``sample_speaker`` holds -1 for non-speech samples and a speaker index
    otherwise. A frame is speech when at least half its samples are speech;
    the frame's speaker is the index with the most samples (lowest index on
    speaker ties).
    """
    n = frame_count(len(sample_speaker), spec)
    out = np.full(n, -1, dtype=np.int32)
    length, shift = spec.frame_length, spec.frame_shift
    for i in range(n):
        window = sample_speaker[i * shift : i * shift + length]
        speech = window[window >= 0]
        if 2 * len(speech) >= length:
            out[i] = np.argmax(np.bincount(speech))
    return out


@dataclass(frozen=True)
class LabeledUtterance:
    """Waveform with sample-accurate speaker attribution.

    ``frame_speaker`` is the per-frame speaker index (-1 for none);
    ``labels`` requires a target and maps frames to {ns, ts, nts}.
    """

    wave: Waveform
    sample_speaker: np.ndarray      # (T,) int32, -1 = no speech
    speakers: tuple[str, ...]       # index -> speaker_id
    target: str | None = None
    frame_speaker: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        sample_speaker = np.asarray(self.sample_speaker, dtype=np.int32)
        if sample_speaker.shape != (self.wave.n_samples,):
            raise ValueError(
                f"sample_speaker length {sample_speaker.shape} != "
                f"waveform length ({self.wave.n_samples},)"
            )
        object.__setattr__(self, "sample_speaker", sample_speaker)
        frame_speaker = self.frame_speaker
        if frame_speaker is None:
            frame_speaker = frame_speakers_from_samples(sample_speaker)
        object.__setattr__(self, "frame_speaker", frame_speaker)

    @property
    def n_frames(self) -> int:
        return len(self.frame_speaker)

    @property
    def speaker_of_frame(self) -> list[str | None]:
        return [self.speakers[i] if i >= 0 else None for i in self.frame_speaker]

    @property
    def speech_mask(self) -> np.ndarray:
        return self.frame_speaker >= 0

    @property
    def labels(self) -> np.ndarray:
        """Per-frame classes {ns, ts, nts}; requires an assigned target."""
        if self.target is None:
            raise ValueError("labels need a target speaker; use concat_multi_speaker")
        out = np.full(self.n_frames, NS, dtype=np.int8)
        try:
            target_idx = self.speakers.index(self.target)
        except ValueError:
            target_idx = -2  # target absent: all speech is non-target
        speech = self.frame_speaker >= 0
        out[speech] = np.where(self.frame_speaker[speech] == target_idx, TS, NTS)
        return out


def synth_utterance(
    profile: SyntheticSpeakerProfile, duration: float, rng: np.random.Generator
) -> LabeledUtterance:
    """Alternating voiced spans and silence gaps, labels from construction.

    Voiced spans last U(0.3, 1.5) s, gaps U(0.1, 0.5) s, starting with a
    gap so both frame kinds always occur. Deterministic given (profile,
    duration, rng state).
    """
    if duration < 1.0:
        raise ValueError(f"duration must be at least 1 s, got {duration}")
    n_total = int(round(duration * SAMPLE_RATE))
    samples = np.zeros(n_total)
    speaker = np.full(n_total, -1, dtype=np.int32)
    pos = int(rng.uniform(0.1, 0.5) * SAMPLE_RATE)
    voiced = True
    while pos < n_total:
        if voiced:
            span = int(rng.uniform(0.3, 1.5) * SAMPLE_RATE)
            end = min(pos + span, n_total)
            samples[pos:end] = _harmonic_segment(profile, end - pos, rng)
            speaker[pos:end] = 0
        else:
            span = int(rng.uniform(0.1, 0.5) * SAMPLE_RATE)
            end = min(pos + span, n_total)
        pos = end
        voiced = not voiced
    return LabeledUtterance(
        wave=Waveform(samples), sample_speaker=speaker, speakers=(profile.speaker_id,)
    )


def sample_enrolment(
    profile: SyntheticSpeakerProfile,
    rng: np.random.Generator,
    seconds: float = 6.0,
) -> Waveform:
    """At least 5 s of gap-free speech from the profile."""
    seconds = max(seconds, 5.0)
    n_total = int(round(seconds * SAMPLE_RATE))
    samples = np.zeros(n_total)
    pos = 0
    while pos < n_total:
        span = int(rng.uniform(0.3, 1.5) * SAMPLE_RATE)
        end = min(pos + span, n_total)
        samples[pos:end] = _harmonic_segment(profile, end - pos, rng)
        pos = end
    return Waveform(samples)


def concat_multi_speaker(
    utterances: list[LabeledUtterance], target: str
) -> LabeledUtterance:
    """Concatenate 1-3 utterances and label frames against a target speaker.

    Speech frames become ts when their speaker equals the target, nts
    otherwise (target-absent mixtures are allowed); silence stays ns.
    Frames spanning a junction are resolved by the per-frame sample
    majority, so the label track always matches the concatenated waveform's
    frame count.
    """
    if not utterances:
        raise ValueError("need at least one utterance")
    if len(utterances) > 3:
        raise ValueError(f"at most 3 utterances per mixture, got {len(utterances)}")
    speakers: list[str] = []
    pieces = []
    speaker_tracks = []
    for utt in utterances:
        remap = {}
        for idx, spk in enumerate(utt.speakers):
            if spk not in speakers:
                speakers.append(spk)
            remap[idx] = speakers.index(spk)
        track = utt.sample_speaker.copy()
        for old, new in remap.items():
            track[utt.sample_speaker == old] = new
        pieces.append(utt.wave.samples)
        speaker_tracks.append(track)
    return LabeledUtterance(
        wave=Waveform(np.concatenate(pieces)),
        sample_speaker=np.concatenate(speaker_tracks),
        speakers=tuple(speakers),
        target=target,
    )


# ---------------------------------------------------------------------------
# noise, reverberation, augmentation
# ---------------------------------------------------------------------------


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add noise scaled so the full-span power ratio hits ``snr_db`` exactly."""
    if noise.n_samples == 0:
        raise DegenerateInputError("noise is empty")
    reps = -(-clean.n_samples // noise.n_samples)
    noise_span = np.tile(noise.samples, reps)[: clean.n_samples]
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(noise_span**2))
    if p_clean == 0.0:
        raise DegenerateInputError("clean signal is all zeros")
    if p_noise == 0.0:
        raise DegenerateInputError("noise is all zeros over the mixed span")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + scale * noise_span)


_DIRECT_CONV_MAX_TAPS = 64  # short kernels convolve exactly; long ones via FFT


def apply_rir(wave: Waveform, rir: np.ndarray) -> Waveform:
    """Convolve with a room impulse response, truncated and peak-matched.

    Short kernels use direct convolution (a unit impulse is exactly the
    identity); longer responses go through FFT convolution.
    """
    rir = np.asarray(rir, dtype=np.float64)
    if rir.ndim != 1 or len(rir) == 0:
        raise ValueError(f"rir must be a non-empty 1-D vector, got shape {rir.shape}")
    if len(rir) <= _DIRECT_CONV_MAX_TAPS:
        out = np.convolve(wave.samples, rir)[: wave.n_samples]
    else:
        out = scipy.signal.fftconvolve(wave.samples, rir)[: wave.n_samples]
    in_peak = np.abs(wave.samples).max()
    out_peak = np.abs(out).max()
    if in_peak > 0 and out_peak > 0:
        out = out * (in_peak / out_peak)
    return Waveform(out)


def make_rir(t60: float, rng: np.random.Generator, length_factor: float = 1.2) -> np.ndarray:
    """Synthetic exponentially decaying impulse response with the given T60.

    A unit direct path plus a diffuse tail; the tail noise is low-passed
    (rooms absorb high frequencies faster), which is also what makes
    reverberated signals measurably more correlated over time.
    """
    if t60 <= 0:
        raise ValueError(f"t60 must be positive, got {t60}")
    n = max(int(t60 * length_factor * SAMPLE_RATE), 2)
    t = np.arange(n) / SAMPLE_RATE
    envelope = np.exp(-np.log(1000.0) * t / t60)
    tail = np.convolve(rng.normal(size=n), np.ones(8) / 8.0, mode="same")
    rir = tail * envelope
    rir[0] = 1.0  # direct path
    return rir


@dataclass(frozen=True)
class MixSpec:
    """Augmentation policy: what noise/reverb to apply and how often.

    ``snr_db`` of None samples uniformly from ``snr_range`` per call;
    ``noise_kind`` of None samples uniformly from the bank's kinds.
    """

    snr_db: float | None = None
    noise_kind: str | None = None
    apply_noise_prob: float = 0.5
    apply_rir_prob: float = 0.5
    snr_range: tuple[float, float] = TRAIN_SNR_RANGE
    rir_t60_range: tuple[float, float] = (0.2, 0.6)

    def __post_init__(self):
        for name, p in (("apply_noise_prob", self.apply_noise_prob),
                        ("apply_rir_prob", self.apply_rir_prob)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.snr_db is not None and not (
            self.snr_range[0] <= self.snr_db <= self.snr_range[1]
        ):
            raise ValueError(
                f"snr_db {self.snr_db} outside range {self.snr_range}"
            )
        if self.noise_kind is not None and self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")


# Pools are pure functions of (seed, kind, duration); share them process-wide.
_POOL_CACHE: dict[tuple, np.ndarray] = {}


class NoiseBank:
    """Procedurally generated noise pools, one per kind, lazily cached.

    The pools are deterministic in the bank seed; sampling crops are drawn
    from the caller's rng so augmentation stays reproducible end to end.
    """

    def __init__(
        self,
        kinds: tuple[str, ...] = NOISE_KINDS,
        holdout: str | None = HOLDOUT_NOISE,
        seed: int = 0,
        pool_seconds: float = 20.0,
    ):
        unknown = set(kinds) - set(NOISE_KINDS)
        if unknown:
            raise ValueError(f"unknown noise kinds {sorted(unknown)}")
        self.kinds = tuple(kinds)
        self.holdout = holdout
        self.seed = seed
        self.pool_seconds = pool_seconds
        self._pools: dict[str, np.ndarray] = {}

    @property
    def seen_kinds(self) -> tuple[str, ...]:
        return tuple(k for k in self.kinds if k != self.holdout)

    @property
    def unseen_kinds(self) -> tuple[str, ...]:
        return tuple(k for k in self.kinds if k == self.holdout)

    def training_view(self) -> "NoiseBank":
        """Bank restricted to seen kinds, sharing this bank's pools."""
        view = NoiseBank(self.seen_kinds, holdout=None, seed=self.seed,
                         pool_seconds=self.pool_seconds)
        view._pools = self._pools
        return view

    def pool(self, kind: str) -> np.ndarray:
        if kind not in self.kinds:
            raise ValueError(f"noise kind {kind!r} not in bank {self.kinds}")
        if kind not in self._pools:
            key = (self.seed, kind, self.pool_seconds)
            if key not in _POOL_CACHE:
                rng = np.random.default_rng([self.seed, 0xA05E, NOISE_KINDS.index(kind)])
                _POOL_CACHE[key] = _synthesize_noise_pool(kind, self.pool_seconds, rng)
            self._pools[kind] = _POOL_CACHE[key]
        return self._pools[kind]

    def sample(self, kind: str, n_samples: int, rng: np.random.Generator) -> Waveform:
        pool = self.pool(kind)
        start = int(rng.integers(0, len(pool)))
        reps = -(-(start + n_samples) // len(pool)) + 1
        tiled = np.tile(pool, reps)
        return Waveform(tiled[start : start + n_samples])


def _shaped_noise(n: int, rng: np.random.Generator, envelope_fn) -> np.ndarray:
    """White noise shaped in the frequency domain by ``envelope_fn(hz)``."""
    white = rng.normal(size=n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    spectrum *= envelope_fn(freqs)
    return np.fft.irfft(spectrum, n=n)


def _voices(n: int, rng: np.random.Generator, count: int) -> np.ndarray:
    """Sum of detuned synthetic voices, the babble building block."""
    total = np.zeros(n)
    duration = n / SAMPLE_RATE
    for v in range(count):
        profile = make_profile(f"noise_voice_{v}", int(rng.integers(0, 2**31)))
        utt = synth_utterance(profile, max(duration, 1.0), rng)
        total += utt.wave.samples[:n]
    return total


def _rms_normalize(x: np.ndarray, target: float = 0.1) -> np.ndarray:
    rms = np.sqrt(np.mean(x**2))
    return x * (target / rms) if rms > 0 else x


def _synthesize_noise_pool(kind: str, seconds: float, rng: np.random.Generator) -> np.ndarray:
    n = int(seconds * SAMPLE_RATE)
    if kind == "ssn":
        # Speech-shaped: rises through the low band, rolls off above ~500 Hz.
        out = _shaped_noise(n, rng, lambda f: (f / (f + 120.0)) / (1.0 + (f / 500.0) ** 1.2))
    elif kind == "street":
        out = _shaped_noise(n, rng, lambda f: 1.0 / (1.0 + (f / 250.0) ** 2) + 0.02)
    elif kind == "bus":
        rumble = _shaped_noise(n, rng, lambda f: 1.0 / (1.0 + (f / 150.0) ** 2) + 0.01)
        t = np.arange(n) / SAMPLE_RATE
        hum_f0 = rng.uniform(80.0, 110.0)
        hum = sum(
            np.sin(2.0 * np.pi * h * hum_f0 * t + rng.uniform(0, 2 * np.pi)) / h
            for h in range(1, 5)
        )
        am = 1.0 + 0.3 * np.sin(2.0 * np.pi * rng.uniform(0.2, 0.6) * t)
        out = _rms_normalize(rumble) + 0.4 * _rms_normalize(hum * am)
    elif kind == "babble":
        out = _voices(n, rng, count=6)
    elif kind == "cafe":
        voices = _voices(n, rng, count=4)
        clatter = np.zeros(n)
        for _ in range(int(seconds * 3)):
            pos = int(rng.integers(0, n - 800))
            freq = rng.uniform(1800.0, 4200.0)
            t = np.arange(800) / SAMPLE_RATE
            clatter[pos : pos + 800] += (
                rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * freq * t) * np.exp(-t * 60.0)
            )
        floor = _shaped_noise(n, rng, lambda f: 1.0 / (1.0 + (f / 900.0) ** 2) + 0.05)
        out = _rms_normalize(voices) + 0.6 * _rms_normalize(clatter) + 0.3 * _rms_normalize(floor)
    elif kind == "pedestrian":
        voices = _voices(n, rng, count=2)
        background = _shaped_noise(n, rng, lambda f: 1.0 / (1.0 + (f / 300.0) ** 2) + 0.03)
        out = 0.7 * _rms_normalize(voices) + _rms_normalize(background)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return _rms_normalize(out)


def augment_wave(
    wave: Waveform,
    spec: MixSpec,
    bank: NoiseBank,
    rng: np.random.Generator,
) -> Waveform:
    """Waveform-level core of `augment`: noise then reverb, each by its prob."""
    if rng.random() < spec.apply_noise_prob:
        kind = spec.noise_kind
        if kind is None:
            kind = bank.kinds[int(rng.integers(0, len(bank.kinds)))]
        snr = spec.snr_db
        if snr is None:
            snr = float(rng.uniform(*spec.snr_range))
        noise = bank.sample(kind, wave.n_samples, rng)
        wave = mix_at_snr(wave, noise, snr)
    if rng.random() < spec.apply_rir_prob:
        t60 = float(rng.uniform(*spec.rir_t60_range))
        rir = make_rir(t60, rng)
        wave = apply_rir(wave, rir)
    return wave


def augment(
    utt: LabeledUtterance,
    spec: MixSpec,
    bank: NoiseBank,
    rng: np.random.Generator,
) -> LabeledUtterance:
    """Independently apply additive noise and reverberation.

    Labels and speaker attribution are never touched: augmentation changes
    the waveform only.
    """
    return replace(utt, wave=augment_wave(utt.wave, spec, bank, rng))


# ---------------------------------------------------------------------------
# dataset builder and manifest
# ---------------------------------------------------------------------------

DATASET_META_NAME = "dataset.json"
MANIFEST_NAME = "manifest.jsonl"

MANIFEST_ENTRY_SCHEMA = {
    "type": "object",
    "required": [
        "id", "split", "wav", "n_samples", "n_frames", "speakers",
        "target", "target_present", "enrolment", "labels_rle", "seed",
    ],
    "properties": {
        "id": {"type": "string"},
        "split": {"enum": ["train", "val", "test"]},
        "wav": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 0},
        "n_frames": {"type": "integer", "minimum": 0},
        "speakers": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "target": {"type": "string"},
        "target_present": {"type": "boolean"},
        "enrolment": {"type": "string"},
        "labels_rle": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [{"enum": list(LABEL_NAMES)}, {"type": "integer", "minimum": 1}],
                "minItems": 2,
                "maxItems": 2,
            },
        },
        "seed": {"type": "array", "items": {"type": "integer"}},
    },
    "additionalProperties": False,
}

DATASET_META_SCHEMA = {
    "type": "object",
    "required": [
        "format", "version", "sample_rate", "master_seed", "noise_kinds",
        "holdout_noise", "splits", "frame",
    ],
    "properties": {
        "format": {"const": "tsvadlab-dataset"},
        "version": {"type": "integer"},
        "sample_rate": {"const": SAMPLE_RATE},
        "master_seed": {"type": "integer"},
        "noise_kinds": {"type": "array", "items": {"enum": list(NOISE_KINDS)}},
        "holdout_noise": {"enum": list(NOISE_KINDS)},
        "splits": {"type": "object"},
        "frame": {"type": "object"},
    },
}


def encode_labels_rle(labels: np.ndarray) -> list[list]:
    runs: list[list] = []
    for value in labels:
        name = LABEL_NAMES[int(value)]
        if runs and runs[-1][0] == name:
            runs[-1][1] += 1
        else:
            runs.append([name, 1])
    return runs


def decode_labels_rle(runs: list[list]) -> np.ndarray:
    out: list[int] = []
    for name, count in runs:
        out.extend([LABEL_NAMES.index(name)] * count)
    return np.asarray(out, dtype=np.int8)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    wav: str
    n_samples: int
    n_frames: int
    speakers: tuple[str, ...]
    target: str
    target_present: bool
    enrolment: str
    labels_rle: list
    seed: list

    def to_json(self) -> dict:
        d = {**self.__dict__}
        d["speakers"] = list(self.speakers)
        return d

    @staticmethod
    def from_json(d: dict) -> "ManifestEntry":
        _validate_schema(d, MANIFEST_ENTRY_SCHEMA)
        d = dict(d)
        d["speakers"] = tuple(d["speakers"])
        return ManifestEntry(**d)


def _split_counts(total: int, fractions: tuple[float, float, float]) -> dict[str, int]:
    names = ("train", "val", "test")
    counts = {name: int(total * frac) for name, frac in zip(names, fractions)}
    counts["train"] += total - sum(counts.values())
    return counts


def build_dataset(
    out_dir: str | Path,
    n_speakers: int,
    n_utterances: int,
    seed: int,
    speaker_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25),
    utterance_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    component_duration: tuple[float, float] = (2.0, 5.0),
    target_absent_prob: float = 0.2,
    holdout_noise: str = HOLDOUT_NOISE,
) -> Path:
    """Generate a labeled multi-speaker dataset on disk.

    Speaker sets are disjoint across train/val/test. Each utterance
    concatenates 1-3 single-speaker utterances from its split and assigns
    a target speaker (sometimes absent from the mixture). Audio is stored
    clean; noise and reverberation are applied online by training and at
    fixed SNRs by evaluation, with ``holdout_noise`` excluded from
    training. Returns the dataset directory.
    """
    if n_speakers < 4:
        raise ValueError(f"need at least 4 speakers for disjoint splits, got {n_speakers}")
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    (out_dir / "enrol").mkdir(parents=True, exist_ok=True)

    speaker_ids = [f"spk_{i:03d}" for i in range(n_speakers)]
    spk_counts = _split_counts(n_speakers, speaker_fractions)
    split_speakers = {
        "train": speaker_ids[: spk_counts["train"]],
        "val": speaker_ids[spk_counts["train"] : spk_counts["train"] + spk_counts["val"]],
        "test": speaker_ids[spk_counts["train"] + spk_counts["val"] :],
    }
    utt_counts = _split_counts(n_utterances, utterance_fractions)

    profiles = {
        spk: make_profile(spk, seed=int(np.random.default_rng([seed, 0x5BEA, i]).integers(2**31)))
        for i, spk in enumerate(speaker_ids)
    }
    for i, spk in enumerate(speaker_ids):
        enrol_rng = np.random.default_rng([seed, 0xE9801, i])
        write_wav(out_dir / "enrol" / f"{spk}.wav", sample_enrolment(profiles[spk], enrol_rng))

    entries: list[ManifestEntry] = []
    index = 0
    for split in ("train", "val", "test"):
        speakers = split_speakers[split]
        for within_split in range(utt_counts[split]):
            utt_seed = [seed, 0x077, index]
            # round-robin targets keep ts/nts balanced per speaker even in
            # small splits, so target identity cannot be read off speaker
            # identity
            target = speakers[within_split % len(speakers)]
            entry = _generate_utterance(
                out_dir, index, split, speakers, profiles, utt_seed,
                component_duration, target_absent_prob, target,
            )
            entries.append(entry)
            index += 1

    meta = {
        "format": "tsvadlab-dataset",
        "version": 1,
        "sample_rate": SAMPLE_RATE,
        "master_seed": seed,
        "noise_kinds": list(NOISE_KINDS),
        "holdout_noise": holdout_noise,
        "splits": {
            split: {"speakers": split_speakers[split], "utterances": utt_counts[split]}
            for split in ("train", "val", "test")
        },
        "frame": {"length": _SPEC.frame_length, "shift": _SPEC.frame_shift},
    }
    (out_dir / DATASET_META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    with open(out_dir / MANIFEST_NAME, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
    return out_dir


def _generate_utterance(
    out_dir: Path,
    index: int,
    split: str,
    speakers: list[str],
    profiles: dict,
    utt_seed: list,
    component_duration: tuple[float, float],
    target_absent_prob: float,
    target: str,
) -> ManifestEntry:
    rng = np.random.default_rng(utt_seed)
    n_mix = int(rng.integers(1, min(3, len(speakers)) + 1))
    others = [s for s in speakers if s != target]
    absent = bool(others) and n_mix <= len(others) and rng.random() < target_absent_prob
    if absent:
        chosen = list(rng.choice(others, size=n_mix, replace=False))
    else:
        chosen = [target] + (
            list(rng.choice(others, size=n_mix - 1, replace=False)) if n_mix > 1 else []
        )
        chosen = [chosen[i] for i in rng.permutation(n_mix)]
    parts = [
        synth_utterance(profiles[spk], float(rng.uniform(*component_duration)), rng)
        for spk in chosen
    ]
    mixture = concat_multi_speaker(parts, target)

    utt_id = f"utt_{index:06d}"
    wav_rel = f"wavs/{utt_id}.wav"
    write_wav(out_dir / wav_rel, mixture.wave)
    return ManifestEntry(
        id=utt_id,
        split=split,
        wav=wav_rel,
        n_samples=mixture.wave.n_samples,
        n_frames=mixture.n_frames,
        speakers=tuple(mixture.speakers),
        target=target,
        target_present=target in mixture.speakers,
        enrolment=f"enrol/{target}.wav",
        labels_rle=encode_labels_rle(mixture.labels),
        seed=list(utt_seed),
    )


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root: str | Path, cache_waves: bool = True):
        from .audio import read_wav

        self.root = Path(root)
        self._read_wav = read_wav
        # PCM16 samples are exactly representable in float32, so caching at
        # single precision loses nothing against re-reading the file.
        self._wave_cache: dict[str, np.ndarray] | None = {} if cache_waves else None
        meta_path = self.root / DATASET_META_NAME
        if not meta_path.exists():
            raise FileNotFoundError(f"{self.root} is not a dataset (missing {DATASET_META_NAME})")
        self.meta = json.loads(meta_path.read_text())
        _validate_schema(self.meta, DATASET_META_SCHEMA)
        self.entries: list[ManifestEntry] = []
        with open(self.root / MANIFEST_NAME) as f:
            for line in f:
                if line.strip():
                    self.entries.append(ManifestEntry.from_json(json.loads(line)))

    def entries_for(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def wave(self, entry: ManifestEntry) -> Waveform:
        if self._wave_cache is None:
            return self._read_wav(self.root / entry.wav)
        if entry.wav not in self._wave_cache:
            samples = self._read_wav(self.root / entry.wav).samples
            self._wave_cache[entry.wav] = samples.astype(np.float32)
        return Waveform(self._wave_cache[entry.wav].astype(np.float64))

    def labels(self, entry: ManifestEntry) -> np.ndarray:
        labels = decode_labels_rle(entry.labels_rle)
        if len(labels) != entry.n_frames:
            raise ValueError(
                f"{entry.id}: RLE decodes to {len(labels)} frames, expected {entry.n_frames}"
            )
        return labels

    def enrolment_wave(self, entry: ManifestEntry) -> Waveform:
        return self._read_wav(self.root / entry.enrolment)

    def noise_bank(self, training_only: bool = False, pool_seconds: float = 20.0) -> NoiseBank:
        bank = NoiseBank(
            kinds=tuple(self.meta["noise_kinds"]),
            holdout=self.meta["holdout_noise"],
            seed=self.meta["master_seed"],
            pool_seconds=pool_seconds,
        )
        return bank.training_view() if training_only else bank


def load_dataset(root: str | Path) -> Dataset:
    return Dataset(root)
