"""Mono audio container plus WAV file I/O and resampling.

The :class:`AudioClip` is the universal carrier between extraction, synthesis,
generation and metrics.  Samples are float64 in [-1, 1]; everything analysis-
side runs at 16 kHz, so :func:`resample` is applied on ingest.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import DecodeError, EmptyInput, InvalidAudio

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class AudioClip:
    """Immutable mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidAudio(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidAudio("audio contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def scaled(self, gain: float) -> "AudioClip":
        return AudioClip(self.samples * gain, self.sample_rate)


def silence(duration: float, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    return AudioClip(np.zeros(int(round(duration * sample_rate))), sample_rate)


def mix(clips: list[AudioClip], peak: float | None = None) -> AudioClip:
    """Sum clips (padding shorter ones); optionally renormalize to ``peak``."""
    if not clips:
        raise EmptyInput("nothing to mix")
    rate = clips[0].sample_rate
    if any(c.sample_rate != rate for c in clips):
        raise InvalidAudio("cannot mix clips with different sample rates")
    n = max(len(c) for c in clips)
    out = np.zeros(n)
    for c in clips:
        out[: len(c)] += c.samples
    if peak is not None:
        m = np.max(np.abs(out))
        if m > 1e-12:
            out *= peak / m
    return AudioClip(out, rate)


def concat(clips: list[AudioClip]) -> AudioClip:
    if not clips:
        raise EmptyInput("nothing to concatenate")
    rate = clips[0].sample_rate
    if any(c.sample_rate != rate for c in clips):
        raise InvalidAudio("cannot concatenate clips with different sample rates")
    return AudioClip(np.concatenate([c.samples for c in clips]), rate)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampler; adequate for pitch-class analysis."""
    if target_rate <= 0:
        raise InvalidAudio("target_rate must be positive")
    if clip.sample_rate == target_rate:
        return clip
    if len(clip) == 0:
        return AudioClip(np.zeros(0), target_rate)
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    t_in = np.arange(len(clip)) / clip.sample_rate
    t_out = np.arange(n_out) / target_rate
    return AudioClip(np.interp(t_out, t_in, clip.samples), target_rate)


def fit_length(clip: AudioClip, n_samples: int) -> AudioClip:
    """Zero-pad or crop to exactly ``n_samples``."""
    x = clip.samples
    if len(x) >= n_samples:
        return AudioClip(x[:n_samples], clip.sample_rate)
    return AudioClip(np.pad(x, (0, n_samples - len(x))), clip.sample_rate)


def read_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file (PCM16 or IEEE float32); stereo is downmixed."""
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if data.ndim == 2:
        data = data.astype(np.float64).mean(axis=1)
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = np.asarray(data, dtype=np.float64)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise DecodeError(f"unsupported WAV sample format {data.dtype} in {path}")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write mono PCM16 little-endian."""
    x = np.clip(clip.samples, -1.0, 1.0)
    wavfile.write(path, clip.sample_rate, (x * 32767.0).astype(np.int16))
