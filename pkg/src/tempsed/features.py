"""Waveform to standardized log-mel spectrogram.

Real audio enters as 16-bit PCM mono WAV, is peak-normalized, resampled to
22050 Hz if needed, and framed with a 2048-sample Hamming window hopped every
363 samples, which maps a 10 s clip to exactly 608 frames. Power spectra go
through a 128-band HTK mel filterbank, log compression with a small epsilon,
and optional per-bin standardization whose statistics are fitted once on the
training split. Everything here is a pure function.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SAMPLE_RATE = 22050
WINDOW_SIZE = 2048
HOP_SIZE = 363
MEL_BINS = 128
LOG_EPS = 1e-10
STD_FLOOR = 1e-5


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples with their sample rate."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self) -> None:
        s = np.array(self.samples, dtype=np.float64, copy=True)
        if s.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite values")
        if not self.sample_rate > 0:
            raise ValueError(f"invalid sample rate {self.sample_rate}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class SpectralMap:
    """Log-mel map of one clip, shape (T, 128), plus the hop in seconds."""

    frames: np.ndarray
    frame_hop: float

    def __post_init__(self) -> None:
        f = np.array(self.frames, dtype=np.float64, copy=True)
        if f.ndim != 2 or f.shape[1] != MEL_BINS:
            raise ValueError(f"spectral map must be (T, {MEL_BINS}), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("spectral map contains non-finite values")
        if not self.frame_hop > 0:
            raise ValueError(f"invalid frame hop {self.frame_hop}")
        f.setflags(write=False)
        object.__setattr__(self, "frames", f)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class StandardizationStats:
    """Per-bin mean and population std (floored at 1e-5) of a training corpus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64, copy=True)
        std = np.array(self.std, dtype=np.float64, copy=True)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ValueError("mean and std must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("non-finite standardization stats")
        if not np.all(std > 0):
            raise ValueError("std components must be positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def peak_normalize(w: Waveform) -> Waveform:
    """Scale so max |sample| is 1; all-zero input comes back unchanged."""
    peak = np.max(np.abs(w.samples)) if w.samples.size else 0.0
    if peak == 0.0:
        return w
    return Waveform(w.samples / peak, w.sample_rate)


def resample_linear(w: Waveform, target_rate: float = SAMPLE_RATE) -> Waveform:
    """Linear-interpolation resampling. Good enough for band patterns; not a
    band-limited resampler."""
    if w.sample_rate == target_rate:
        return w
    n_in = w.samples.size
    if n_in == 0:
        raise ValueError("cannot resample an empty waveform")
    n_out = max(1, round(n_in * target_rate / w.sample_rate))
    positions = np.arange(n_out) * (w.sample_rate / target_rate)
    samples = np.interp(positions, np.arange(n_in), w.samples)
    return Waveform(samples, target_rate)


def frame_count(num_samples: int, hop: int = HOP_SIZE) -> int:
    """T = floor(N / hop) + 1; with 10 s at 22050 Hz this is 608."""
    return num_samples // hop + 1


def mel_filterbank(
    num_filters: int = MEL_BINS,
    window_size: int = WINDOW_SIZE,
    sample_rate: float = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """(num_filters, window_size//2 + 1) triangular filters, HTK mel scale,
    area-normalized so each triangle integrates to roughly constant energy."""
    if fmax is None:
        fmax = sample_rate / 2.0

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = window_size // 2 + 1
    fft_freqs = np.arange(n_bins) * (sample_rate / window_size)
    mel_points = np.linspace(to_mel(fmin), to_mel(fmax), num_filters + 2)
    hz_points = from_mel(mel_points)

    weights = np.zeros((num_filters, n_bins), dtype=np.float64)
    for i in range(num_filters):
        lo, center, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        weights[i] = np.maximum(0.0, np.minimum(rising, falling))
        weights[i] *= 2.0 / (hi - lo)
    return weights


def _power_spectrogram(samples: np.ndarray) -> np.ndarray:
    padded = np.pad(samples, WINDOW_SIZE // 2, mode="reflect")
    n_frames = frame_count(samples.size)
    window = np.hamming(WINDOW_SIZE)
    starts = np.arange(n_frames) * HOP_SIZE
    # (T, 2048) frame matrix via stride tricks would be a view; an explicit
    # gather keeps it simple and T is small.
    idx = starts[:, None] + np.arange(WINDOW_SIZE)[None, :]
    frames = padded[idx] * window
    spectrum = np.fft.rfft(frames, axis=1)
    return np.abs(spectrum) ** 2


def log_mel(w: Waveform, stats: StandardizationStats | None = None) -> SpectralMap:
    """Log-mel extraction at 22050 Hz; standardizes per bin when stats given."""
    if w.samples.size == 0:
        raise ValueError("cannot extract features from an empty waveform")
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(
            f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}; resample first"
        )
    power = _power_spectrogram(w.samples)
    mel_power = power @ mel_filterbank().T
    frames = np.log(mel_power + LOG_EPS)
    if stats is not None:
        frames = standardize(frames, stats)
    return SpectralMap(frames, HOP_SIZE / SAMPLE_RATE)


def fit_standardization(maps: Iterable[SpectralMap | np.ndarray]) -> StandardizationStats:
    """Per-bin mean and population std pooled over all frames of all inputs."""
    arrays = [m.frames if isinstance(m, SpectralMap) else np.asarray(m) for m in maps]
    if not arrays:
        raise ValueError("need at least one spectrogram to fit standardization")
    stacked = np.concatenate(arrays, axis=0).astype(np.float64)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return StandardizationStats(mean, std)


def standardize(frames: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"stats cover {stats.mean.shape[0]} bins, map has {frames.shape[1]}"
        )
    return (frames - stats.mean) / stats.std


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into [-1, 1) floats."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        raw = fh.readframes(fh.getnframes())
        rate = fh.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, float(rate))


def serialize_stats(stats: StandardizationStats) -> bytes:
    """TSV with header: bin, mean, std. Floats keep full round-trip precision."""
    lines = ["bin\tmean\tstd\n"]
    for i in range(stats.mean.shape[0]):
        lines.append(f"{i}\t{stats.mean[i]:.17g}\t{stats.std[i]:.17g}\n")
    return "".join(lines).encode("utf-8")


def parse_stats(data: bytes | str) -> StandardizationStats:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows: list[tuple[int, float, float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"stats line {lineno}: expected 3 fields")
        if lineno == 1 and fields[0] == "bin":
            continue
        rows.append((int(fields[0]), float(fields[1]), float(fields[2])))
    if not rows:
        raise ValueError("empty standardization stats file")
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError("stats file bin indices must be 0..n-1")
    mean = np.array([r[1] for r in rows])
    std = np.array([r[2] for r in rows])
    return StandardizationStats(mean, std)
