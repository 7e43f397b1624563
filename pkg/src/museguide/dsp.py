"""Deterministic spectral primitives shared by every extractor.

STFT, chromagram, harmonic/percussive separation, the two chroma smoothers,
mel projection and Griffin-Lim reconstruction.  All functions here are pure:
same input bits give same output bits.  Internal math is float64.

Conventions:
    * Hann window, centered frames with reflect padding (unless asked otherwise).
    * Chroma uses equal temperament, A4 = 440 Hz, class 0 = C; only bins in
      [60 Hz, 4 kHz] contribute, which suppresses rumble and hiss.
    * HPSS soft masks are Wiener-style (exponent 2) and sum to 1 per bin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import EmptyInput, InvalidAudio, InvalidWidth, KernelTooLarge, KTooLarge

DEFAULT_CHROMA_HOP = 2048
CHROMA_FMIN = 60.0
CHROMA_FMAX = 4000.0
# Zero-pad factor for the chroma FFT: window stays 2048 but the spectrum is
# interpolated 4x so low-octave semitones land in distinct bins.
CHROMA_PAD_FACTOR = 4


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude spectrogram, frames x bins, non-negative."""

    magnitudes: np.ndarray
    hop_size: int
    window_size: int
    sample_rate: int

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if mags.ndim != 2:
            raise InvalidAudio("spectrogram must be 2-D (frames x bins)")
        object.__setattr__(self, "magnitudes", mags)

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[1]

    @property
    def n_fft(self) -> int:
        return 2 * (self.n_bins - 1)

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.n_fft


@dataclass(frozen=True)
class Chromagram:
    """Frames x 12 pitch-class energies (C = column 0)."""

    energies: np.ndarray
    hop_size: int = DEFAULT_CHROMA_HOP
    sample_rate: int = 16000

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        if e.ndim != 2 or e.shape[1] != 12:
            raise InvalidAudio("chromagram must be frames x 12")
        object.__setattr__(self, "energies", e)

    @property
    def n_frames(self) -> int:
        return self.energies.shape[0]

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.hop_size / self.sample_rate


def _window(kind: str, size: int) -> np.ndarray:
    if kind == "hann":
        return np.hanning(size)
    if kind == "rect":
        return np.ones(size)
    raise ValueError(f"unknown window kind: {kind}")


def _frame_signal(x: np.ndarray, window_size: int, hop_size: int,
                  center: bool) -> np.ndarray:
    if center:
        # odd reflection continues tonal content smoothly across the edges
        pad = window_size // 2
        x = np.pad(x, (pad, pad), mode="reflect", reflect_type="odd")
    n_frames = 1 + max(0, (len(x) - window_size)) // hop_size
    idx = np.arange(window_size)[None, :] + hop_size * np.arange(n_frames)[:, None]
    return x[idx]


def stft_complex(clip: AudioClip, window_size: int, hop_size: int,
                 window: str = "hann", center: bool = True,
                 n_fft: int | None = None) -> np.ndarray:
    """Complex STFT, frames x (n_fft//2 + 1).  ``n_fft >= window_size`` zero-pads."""
    if len(clip) == 0:
        raise EmptyInput("cannot transform an empty clip")
    if hop_size <= 0 or window_size < hop_size:
        raise InvalidAudio("need window_size >= hop_size > 0")
    n_fft = n_fft or window_size
    if n_fft < window_size:
        raise InvalidAudio("n_fft must be >= window_size")
    frames = _frame_signal(clip.samples, window_size, hop_size, center)
    return np.fft.rfft(frames * _window(window, window_size), n=n_fft, axis=1)


def stft(clip: AudioClip, window_size: int, hop_size: int,
         window: str = "hann", center: bool = True,
         n_fft: int | None = None) -> Spectrogram:
    """Magnitude spectrogram of a mono clip."""
    mags = np.abs(stft_complex(clip, window_size, hop_size, window, center, n_fft))
    return Spectrogram(mags, hop_size, window_size, clip.sample_rate)


def istft(spec_complex: np.ndarray, window_size: int, hop_size: int,
          length: int, window: str = "hann") -> np.ndarray:
    """Inverse of the centered STFT via windowed overlap-add."""
    win = _window(window, window_size)
    frames = np.fft.irfft(spec_complex, axis=1)[:, :window_size] * win
    pad = window_size // 2
    total = pad * 2 + length
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for i in range(frames.shape[0]):
        lo = i * hop_size
        if lo >= total:
            break
        hi = min(lo + window_size, total)
        out[lo:hi] += frames[i, : hi - lo]
        norm[lo:hi] += win_sq[: hi - lo]
    # suppress samples with negligible window coverage instead of amplifying them
    floor = max(norm.max(), 1e-12) * 1e-2
    out = np.where(norm > floor, out / np.maximum(norm, floor), 0.0)
    return out[pad : pad + length]


def pitch_class_of_frequency(freq_hz: float | np.ndarray) -> np.ndarray:
    """Equal-temperament pitch class (0 = C) of a frequency in Hz."""
    semis = np.round(12.0 * np.log2(np.asarray(freq_hz, dtype=np.float64) / 440.0))
    return (semis.astype(int) + 9) % 12


def chroma_from_spectrogram(spec: Spectrogram,
                            fmin: float = CHROMA_FMIN,
                            fmax: float = CHROMA_FMAX) -> Chromagram:
    """Fold spectrogram energy (magnitude squared) onto 12 pitch classes."""
    freqs = spec.bin_frequencies()
    usable = (freqs >= fmin) & (freqs <= fmax)
    classes = pitch_class_of_frequency(np.where(usable, freqs, 440.0))
    energy = spec.magnitudes ** 2
    out = np.zeros((spec.n_frames, 12))
    for c in range(12):
        cols = usable & (classes == c)
        if np.any(cols):
            out[:, c] = energy[:, cols].sum(axis=1)
    return Chromagram(out, spec.hop_size, spec.sample_rate)


def chromagram(clip: AudioClip, hop_size: int = DEFAULT_CHROMA_HOP,
               window_size: int = 2048) -> Chromagram:
    """Chromagram of a clip; the large default hop drops redundant detail."""
    spec = stft(clip, window_size, hop_size, n_fft=window_size * CHROMA_PAD_FACTOR)
    return chroma_from_spectrogram(spec)


def _median_filter_axis(x: np.ndarray, width: int, axis: int) -> np.ndarray:
    if width == 1:
        return x.copy()
    half = width // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (half, half)
    xp = np.pad(x, pad, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=axis)
    return np.median(windows, axis=-1)


def hpss(spec: Spectrogram, harm_kernel: int = 17,
         perc_kernel: int = 17) -> tuple[Spectrogram, Spectrogram]:
    """Split a spectrogram into harmonic and percussive parts.

    Median filtering along time yields the harmonic sketch, along frequency
    the percussive sketch; Wiener soft masks (exponent 2) then split the
    energy so the two masks sum to exactly 1 per bin.
    """
    for name, k in (("harm_kernel", harm_kernel), ("perc_kernel", perc_kernel)):
        if k < 3 or k % 2 == 0:
            raise InvalidWidth(f"{name} must be odd and >= 3, got {k}")
    if harm_kernel > spec.n_frames:
        raise KernelTooLarge(
            f"harm_kernel {harm_kernel} exceeds {spec.n_frames} frames")
    if perc_kernel > spec.n_bins:
        raise KernelTooLarge(
            f"perc_kernel {perc_kernel} exceeds {spec.n_bins} bins")
    mag = spec.magnitudes
    harm = _median_filter_axis(mag, harm_kernel, axis=0)
    perc = _median_filter_axis(mag, perc_kernel, axis=1)
    h2, p2 = harm * harm, perc * perc
    denom = h2 + p2
    mask_h = np.where(denom > 0, h2 / np.where(denom > 0, denom, 1.0), 0.5)
    mask_p = 1.0 - mask_h
    make = lambda m: Spectrogram(mag * m, spec.hop_size, spec.window_size,
                                 spec.sample_rate)
    return make(mask_h), make(mask_p)


def median_smooth_time(chroma: Chromagram, width: int) -> Chromagram:
    """Median-filter every pitch-class row along time (reflect edges)."""
    if width < 1 or width % 2 == 0:
        raise InvalidWidth(f"width must be odd and >= 1, got {width}")
    if width > chroma.n_frames:
        raise KernelTooLarge(f"width {width} exceeds {chroma.n_frames} frames")
    out = _median_filter_axis(chroma.energies, width, axis=0)
    return Chromagram(out, chroma.hop_size, chroma.sample_rate)


def nn_smooth(chroma: Chromagram, k: int) -> Chromagram:
    """Replace each frame by the mean of its k most cosine-similar frames.

    Self is always among the candidates (a frame has similarity 1 with
    itself), so k = 1 is the identity.
    """
    if k < 1:
        raise InvalidWidth(f"k must be >= 1, got {k}")
    n = chroma.n_frames
    if k > n:
        raise KTooLarge(f"k={k} exceeds {n} frames")
    x = chroma.energies
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    sim = unit @ unit.T
    # tiny self bonus so ties between identical frames resolve to self first
    sim[np.arange(n), np.arange(n)] += 1e-9
    nearest = np.argpartition(-sim, kth=k - 1, axis=1)[:, :k]
    out = x[nearest].mean(axis=1)
    return Chromagram(out, chroma.hop_size, chroma.sample_rate)


# ---------------------------------------------------------------------------
# Mel projection and reconstruction
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, rows normalized to sum to 1."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = mel_pts[m], mel_pts[m + 1], mel_pts[m + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
        s = fb[m].sum()
        if s > 0:
            fb[m] /= s
    return fb


def mel_spectrogram(clip: AudioClip, n_fft: int, win_size: int, hop_size: int,
                    n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Mel power spectrogram, frames x n_mels.

    Magnitudes are scaled by 2/sum(window) before squaring so a full-scale
    sine contributes a power close to its squared amplitude; that keeps the
    dynamic range stable across window sizes.
    """
    spec = stft(clip, win_size, hop_size, n_fft=n_fft)
    scale = 2.0 / np.sum(_window("hann", win_size))
    power = (spec.magnitudes * scale) ** 2
    fb = mel_filterbank(clip.sample_rate, n_fft, n_mels, fmin, fmax)
    return power @ fb.T


def mel_to_audio(mel_power: np.ndarray, sample_rate: int, n_fft: int,
                 win_size: int, hop_size: int, n_mels: int, fmin: float,
                 fmax: float, n_iters: int = 32, seed: int = 0) -> AudioClip:
    """Invert a mel power spectrogram to audio via Griffin-Lim."""
    fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    inv = np.linalg.pinv(fb)
    power = np.clip(np.asarray(mel_power, dtype=np.float64) @ inv.T, 0.0, None)
    scale = 2.0 / np.sum(_window("hann", win_size))
    mags = np.sqrt(power) / scale
    length = mel_power.shape[0] * hop_size
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=mags.shape)
    x = np.zeros(length)
    for _ in range(max(1, n_iters)):
        x = istft(mags * np.exp(1j * phase), win_size, hop_size, length)
        reproj = stft_complex(AudioClip(_sanitize(x), sample_rate),
                              win_size, hop_size, n_fft=n_fft)
        reproj = reproj[: mags.shape[0]]
        if reproj.shape[0] < mags.shape[0]:
            reproj = np.pad(reproj, ((0, mags.shape[0] - reproj.shape[0]), (0, 0)))
        phase = np.angle(reproj)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return AudioClip(_sanitize(x), sample_rate)


def _sanitize(x: np.ndarray) -> np.ndarray:
    return np.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0)
