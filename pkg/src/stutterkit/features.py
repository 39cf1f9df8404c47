"""Waveform to log-mel features, spectral masking, and synthetic clip data.

The filterbank pipeline is frozen here for reproducibility: pre-emphasis
0.97 (first sample kept as is), 25 ms Hamming-windowed frames every 10 ms,
512-point DFT power spectrum, 80 triangular mel filters spanning 0-8000 Hz
with continuous frequency-domain weights, then log(max(energy, 1e-10)).
All intermediate math is float64; files store float32.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import ClipRecord, N_CLASSES, encode_spans, write_features, write_manifest
from .errors import ValidationError

SAMPLE_RATE = 16_000
FRAME_LENGTH = 400  # 25 ms at 16 kHz
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 80
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
MAX_TIME_MASK = 50
MAX_FREQ_MASK = 10


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio samples, float64 in [-1, 1] nominally."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValidationError(f"waveform must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("waveform contains NaN/Inf")
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_pcm16(cls, pcm: np.ndarray, sample_rate: int) -> "Waveform":
        return cls(np.asarray(pcm, dtype=np.float64) / 32768.0, sample_rate)

    @classmethod
    def from_wav(cls, path: str | Path) -> "Waveform":
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise ValidationError(f"{path}: only mono wav files are supported")
            if f.getsampwidth() != 2:
                raise ValidationError(f"{path}: only 16-bit PCM wav files are supported")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
        pcm = np.frombuffer(raw, dtype="<i2")
        return cls.from_pcm16(pcm, rate)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T x D frame features for one clip."""

    frames: np.ndarray
    frame_shift_ms: int = 10
    frame_length_ms: int = 25

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValidationError(f"features must be [T>=1, D], got shape {arr.shape}")
        if np.any(np.isnan(arr)):
            raise ValidationError("features contain NaN")
        object.__setattr__(self, "frames", arr)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
    f_min: float = 0.0, f_max: float | None = None,
) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2 + 1] with continuous weights.

    Continuous (frequency-domain) weights keep every filter non-degenerate
    even where adjacent mel edges fall inside one DFT bin.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    edges = inverse_mel(np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, bin_freqs.size))
    for j in range(n_mels):
        left, center, right = edges[j], edges[j + 1], edges[j + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_filter_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                       f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    if f_max is None:
        f_max = sample_rate / 2.0
    edges = inverse_mel(np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2))
    return edges[1:-1]


def num_frames(n_samples: int) -> int:
    return 1 + (n_samples - FRAME_LENGTH) // FRAME_SHIFT


def fbank(w: Waveform) -> FeatureSequence:
    """80-dim log-mel features, 25 ms frames every 10 ms, 16 kHz input only.

    Inputs at other sample rates are rejected rather than resampled.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise ValidationError(
            f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate} Hz (resampling "
            "is out of scope; resample upstream)"
        )
    n = w.samples.size
    if n < FRAME_LENGTH:
        raise ValidationError(f"waveform too short: {n} samples < one {FRAME_LENGTH}-sample frame")
    emphasized = np.concatenate([w.samples[:1], w.samples[1:] - PREEMPHASIS * w.samples[:-1]])
    t = num_frames(n)
    offsets = np.arange(t) * FRAME_SHIFT
    frames = emphasized[offsets[:, None] + np.arange(FRAME_LENGTH)[None, :]]
    window = np.hamming(FRAME_LENGTH)
    spectrum = np.fft.rfft(frames * window, n=N_FFT)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ mel_filterbank().T
    return FeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)))


def draw_mask_rectangles(
    t: int, d: int, rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """Draw (time width, time start, freq width, freq start) for one masking pass."""
    u = int(rng.integers(0, min(MAX_TIME_MASK, t) + 1))
    t0 = int(rng.integers(0, t - u + 1))
    v = int(rng.integers(0, min(MAX_FREQ_MASK, d) + 1))
    f0 = int(rng.integers(0, d - v + 1))
    return u, t0, v, f0


def spec_mask(feats: FeatureSequence, rng: np.random.Generator) -> FeatureSequence:
    """Training-time augmentation: one time mask (width up to 50 frames) and one
    frequency mask (width up to 10 bins), both filled with the per-clip mean."""
    x = feats.frames.copy()
    t, d = x.shape
    fill = float(x.mean())
    u, t0, v, f0 = draw_mask_rectangles(t, d, rng)
    x[t0 : t0 + u, :] = fill
    x[:, f0 : f0 + v] = fill
    return FeatureSequence(x, feats.frame_shift_ms, feats.frame_length_ms)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic clip dataset.

    Each clip is Gaussian noise; with probability insert_probs[c], one event
    of class c overwrites a contiguous span by adding the class template
    scaled to 3x the noise level. Clip labels are the union of inserted
    classes; frame_truth records the event spans.
    """

    n_clips: int = 200
    t_min: int = 40
    t_max: int = 80
    event_min: int = 8
    event_max: int = 16
    insert_probs: tuple[float, ...] = (0.35, 0.35, 0.35, 0.35, 0.35)
    noise_level: float = 1.0
    feature_dim: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValidationError("n_clips must be >= 1")
        if not 1 <= self.t_min <= self.t_max:
            raise ValidationError("need 1 <= t_min <= t_max")
        if not 1 <= self.event_min <= self.event_max:
            raise ValidationError("need 1 <= event_min <= event_max")
        if len(self.insert_probs) != N_CLASSES:
            raise ValidationError(f"insert_probs must have {N_CLASSES} entries")
        if any(not 0.0 <= p <= 1.0 for p in self.insert_probs):
            raise ValidationError("insertion probabilities must lie in [0, 1]")
        if self.noise_level <= 0:
            raise ValidationError("noise_level must be positive")
        if self.feature_dim < N_CLASSES:
            raise ValidationError(f"feature_dim must be >= {N_CLASSES}")


def class_templates(feature_dim: int) -> np.ndarray:
    """One deterministic unit pattern per class: disjoint dimension blocks."""
    templates = np.zeros((N_CLASSES, feature_dim))
    block = feature_dim // N_CLASSES
    for c in range(N_CLASSES):
        templates[c, c * block : (c + 1) * block] = 1.0
    return templates


def generate_clip(
    spec: SyntheticSpec, rng: np.random.Generator, templates: np.ndarray | None = None
) -> tuple[np.ndarray, tuple[bool, ...], np.ndarray]:
    """One synthetic clip: (features [T, D], labels, frame truth mask)."""
    if templates is None:
        templates = class_templates(spec.feature_dim)
    t = int(rng.integers(spec.t_min, spec.t_max + 1))
    x = rng.normal(0.0, spec.noise_level, (t, spec.feature_dim))
    truth = np.zeros(t, dtype=bool)
    labels = [False] * N_CLASSES
    for c in range(N_CLASSES):
        if rng.random() < spec.insert_probs[c]:
            length = min(int(rng.integers(spec.event_min, spec.event_max + 1)), t)
            start = int(rng.integers(0, t - length + 1))
            x[start : start + length] += 3.0 * spec.noise_level * templates[c]
            truth[start : start + length] = True
            labels[c] = True
    return x, tuple(labels), truth


def synth_dataset(spec: SyntheticSpec, out_dir: str | Path) -> list[ClipRecord]:
    """Write feature files plus manifest.jsonl; fully determined by spec.seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    templates = class_templates(spec.feature_dim)
    records = []
    for i in range(spec.n_clips):
        x, labels, truth = generate_clip(spec, rng, templates)
        name = f"clip{i:05d}.fgc"
        write_features(out_dir / name, x)
        records.append(
            ClipRecord(
                clip_id=f"clip{i:05d}",
                feature_path=name,
                labels=labels,
                frame_truth=encode_spans(truth),
            )
        )
    write_manifest(out_dir / "manifest.jsonl", records)
    return records
