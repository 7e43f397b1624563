"""Elemental control extraction from teacher audio.

Three extractors turn a clip into the control signals the adapters consume:
a per-frame primary-melody track, a beat/downbeat grid, and a per-bar triad
progression.  ``controls_to_condition`` converts rendered control audio into
the fixed-size tensor the generator side expects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip
from .dsp import (
    DEFAULT_CHROMA_HOP,
    Chromagram,
    chroma_from_spectrogram,
    chromagram,
    median_smooth_time,
    mel_spectrogram,
    nn_smooth,
    stft,
)
from .errors import EmptyInput, NoBeats, TooShort

REST = -1
MAJ = "maj"
MIN = "min"

PITCH_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

# per-frame chroma L1 below this fraction of the clip max is unvoiced
SILENCE_RATIO = 1e-4


@dataclass(frozen=True)
class MelodyTrack:
    """Per-frame dominant pitch class; REST (-1) marks unvoiced frames."""

    classes: np.ndarray
    hop_size: int = DEFAULT_CHROMA_HOP
    sample_rate: int = 16000

    def __post_init__(self):
        c = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "classes", c)

    @property
    def n_frames(self) -> int:
        return len(self.classes)

    def voiced(self) -> np.ndarray:
        return self.classes != REST

    def to_json(self) -> dict:
        return {
            "schema": "melody/v1",
            "sample_rate": self.sample_rate,
            "hop_size": self.hop_size,
            "classes": [int(c) for c in self.classes],
        }

    @staticmethod
    def from_json(obj: dict) -> "MelodyTrack":
        return MelodyTrack(np.array(obj["classes"], dtype=np.int64),
                           int(obj["hop_size"]), int(obj["sample_rate"]))


@dataclass(frozen=True)
class BeatGrid:
    """Detected beats (seconds), downbeat indices into them, and tempo."""

    beat_times: np.ndarray
    downbeat_indices: np.ndarray
    tempo_bpm: float

    def __post_init__(self):
        bt = np.asarray(self.beat_times, dtype=np.float64).reshape(-1)
        db = np.asarray(self.downbeat_indices, dtype=np.int64).reshape(-1)
        if len(bt) > 1 and not np.all(np.diff(bt) > 0):
            raise NoBeats("beat times must be strictly increasing")
        object.__setattr__(self, "beat_times", bt)
        object.__setattr__(self, "downbeat_indices", db)

    def downbeat_times(self) -> np.ndarray:
        return self.beat_times[self.downbeat_indices]

    def to_json(self) -> dict:
        return {
            "schema": "beats/v1",
            "tempo_bpm": float(self.tempo_bpm),
            "beat_times": [float(t) for t in self.beat_times],
            "downbeat_indices": [int(i) for i in self.downbeat_indices],
        }

    @staticmethod
    def from_json(obj: dict) -> "BeatGrid":
        return BeatGrid(np.array(obj["beat_times"]),
                        np.array(obj["downbeat_indices"], dtype=np.int64),
                        float(obj["tempo_bpm"]))


@dataclass(frozen=True)
class ChordEntry:
    bar_index: int
    start: float
    duration: float
    root: int
    quality: str  # MAJ or MIN


@dataclass(frozen=True)
class ChordProgression:
    entries: tuple[ChordEntry, ...]
    skipped_bars: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "skipped_bars", tuple(self.skipped_bars))

    def labels(self) -> list[str]:
        return [f"{PITCH_NAMES[e.root]}:{e.quality}" for e in self.entries]

    def to_json(self) -> dict:
        return {
            "schema": "chords/v1",
            "entries": [
                {"bar": e.bar_index, "start": e.start, "duration": e.duration,
                 "root": e.root, "quality": e.quality}
                for e in self.entries
            ],
            "skipped_bars": list(self.skipped_bars),
        }

    @staticmethod
    def from_json(obj: dict) -> "ChordProgression":
        entries = tuple(
            ChordEntry(int(e["bar"]), float(e["start"]), float(e["duration"]),
                       int(e["root"]), str(e["quality"]))
            for e in obj["entries"])
        return ChordProgression(entries, tuple(obj.get("skipped_bars", [])))


# ---------------------------------------------------------------------------
# Melody
# ---------------------------------------------------------------------------

def _largest_odd_leq(limit: int, preferred: int) -> int:
    k = min(preferred, limit)
    return k if k % 2 == 1 else k - 1


def extract_melody(clip: AudioClip, nn_k: int = 5,
                   median_width: int = 5) -> MelodyTrack:
    """Dominant pitch class per frame after HPSS and the two smoothers.

    Pipeline: STFT -> harmonic part -> chroma (hop 2048) -> nearest-neighbour
    smoothing -> time median -> per-frame argmax; low-energy frames are REST.
    """
    from .dsp import hpss  # local import keeps module init light

    spec = stft(clip, 2048, DEFAULT_CHROMA_HOP, n_fft=8192)
    harm_kernel = _largest_odd_leq(spec.n_frames, 9)
    if harm_kernel >= 3:
        harm, _ = hpss(spec, harm_kernel, 17)
    else:
        harm = spec
    chroma = chroma_from_spectrogram(harm)
    n = chroma.n_frames
    chroma = nn_smooth(chroma, min(nn_k, n))
    chroma = median_smooth_time(chroma, _largest_odd_leq(n, median_width))

    energy = chroma.energies.sum(axis=1)
    peak = energy.max()
    classes = chroma.energies.argmax(axis=1).astype(np.int64)
    if peak <= 0:
        classes[:] = REST
    else:
        classes[energy < SILENCE_RATIO * peak] = REST
    return MelodyTrack(classes, chroma.hop_size, clip.sample_rate)


# ---------------------------------------------------------------------------
# Beats
# ---------------------------------------------------------------------------

ONSET_HOP = 128
ONSET_WIN = 512
TEMPO_MIN = 40.0
TEMPO_MAX = 240.0


def onset_envelope(clip: AudioClip, hop_size: int = ONSET_HOP,
                   win_size: int = ONSET_WIN) -> tuple[np.ndarray, float]:
    """Half-wave rectified spectral flux and its frame rate."""
    spec = stft(clip, win_size, hop_size)
    mag = spec.magnitudes
    flux = np.maximum(mag[1:] - mag[:-1], 0.0).sum(axis=1)
    env = np.concatenate([[0.0], flux])
    return env, clip.sample_rate / hop_size


def _parabolic_refine(y: np.ndarray, i: int) -> float:
    """Sub-sample peak position around index i (clamped to +-0.5)."""
    if i <= 0 or i >= len(y) - 1:
        return float(i)
    denom = y[i - 1] - 2 * y[i] + y[i + 1]
    if abs(denom) < 1e-12:
        return float(i)
    delta = 0.5 * (y[i - 1] - y[i + 1]) / denom
    return i + float(np.clip(delta, -0.5, 0.5))


def _autocorr_tempo(env: np.ndarray, fps: float) -> float:
    e = env - env.mean()
    ac = np.correlate(e, e, mode="full")[len(e) - 1 :]
    lo = max(1, int(np.floor(60.0 / TEMPO_MAX * fps)))
    hi = min(len(ac) - 1, int(np.ceil(60.0 / TEMPO_MIN * fps)))
    if hi <= lo:
        raise TooShort("clip too short for tempo autocorrelation")
    lags = np.arange(lo, hi + 1)
    bpms = 60.0 * fps / lags
    # mild log-normal preference around 120 BPM (one octave std)
    weight = np.exp(-0.5 * (np.log2(bpms / 120.0)) ** 2)
    scores = ac[lo : hi + 1] * weight
    best = int(np.argmax(scores))
    lag = _parabolic_refine(scores, best) + lo
    return 60.0 * fps / lag


def estimate_beats(clip: AudioClip, tightness: float = 8.0) -> BeatGrid:
    """Beat grid via spectral flux, autocorrelation tempo and DP alignment.

    Downbeats are every 4th beat anchored at the strongest onset.
    """
    if clip.duration < 2.0:
        raise TooShort(f"need >= 2 s of audio, got {clip.duration:.2f} s")
    env, fps = onset_envelope(clip)
    if env.max() <= 1e-8:
        raise NoBeats("no onsets above the noise floor")
    env = env / env.max()

    bpm = _autocorr_tempo(env, fps)
    period = 60.0 / bpm * fps

    # Ellis-style dynamic program: reward onset strength, penalize deviation
    # from the estimated period.
    n = len(env)
    score = env.copy()
    backlink = np.full(n, -1, dtype=np.int64)
    lo_off = max(1, int(round(0.5 * period)))
    hi_off = int(round(2.0 * period))
    for t in range(lo_off, n):
        prev_lo = max(0, t - hi_off)
        prev_hi = t - lo_off
        if prev_hi < prev_lo:
            continue
        prev = np.arange(prev_lo, prev_hi + 1)
        penalty = -tightness * (np.log((t - prev) / period)) ** 2
        cand = score[prev] + penalty
        k = int(np.argmax(cand))
        if cand[k] > 0:
            score[t] = env[t] + cand[k]
            backlink[t] = prev[k]

    beats = [int(np.argmax(score))]
    while backlink[beats[-1]] >= 0:
        beats.append(int(backlink[beats[-1]]))
    beats.reverse()
    if len(beats) < 2:
        raise NoBeats("dynamic program found no beat chain")

    # sub-frame refinement on the onset envelope
    times = []
    for b in beats:
        lo = max(0, b - 2)
        hi = min(n, b + 3)
        m = lo + int(np.argmax(env[lo:hi]))
        times.append(_parabolic_refine(env, m) / fps)
    times = np.array(times)
    keep = np.concatenate([[True], np.diff(times) > 1e-3])
    times = times[keep]
    if len(times) < 2:
        raise NoBeats("too few distinct beats")

    frames = np.clip((times * fps).round().astype(int), 0, n - 1)
    anchor = int(np.argmax(env[frames]))
    downbeats = np.arange(anchor % 4, len(times), 4, dtype=np.int64)
    tempo = float(np.clip(60.0 / np.median(np.diff(times)), TEMPO_MIN, TEMPO_MAX))
    return BeatGrid(times, downbeats, tempo)


# ---------------------------------------------------------------------------
# Chords
# ---------------------------------------------------------------------------

def triad_template(root: int, quality: str) -> np.ndarray:
    """Binary {root, third, fifth} template over the 12 pitch classes."""
    third = 4 if quality == MAJ else 3
    t = np.zeros(12)
    for offset in (0, third, 7):
        t[(root + offset) % 12] = 1.0
    return t


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom <= 0:
        return -1.0
    return float(a @ b / denom)


def estimate_chords(clip: AudioClip, grid: BeatGrid) -> ChordProgression:
    """Per-bar triads by correlating bar-summed chroma with 24 templates.

    Bars run downbeat to downbeat (plus a final bar to the clip end); ties
    break toward the lower root, major before minor.
    """
    if len(grid.downbeat_indices) < 1:
        raise NoBeats("beat grid has no downbeats")
    bounds = list(grid.downbeat_times())
    if clip.duration - bounds[-1] > 0.1:
        bounds.append(clip.duration)
    chroma = chromagram(clip)
    times = chroma.frame_times()

    entries = []
    skipped = []
    for bar, (start, end) in enumerate(zip(bounds[:-1], bounds[1:])):
        in_bar = (times >= start) & (times < end)
        if not np.any(in_bar):
            skipped.append(bar)
            continue
        profile = chroma.energies[in_bar].sum(axis=0)
        if profile.max() <= 0:
            skipped.append(bar)
            continue
        profile = profile / profile.max()
        best, best_r = None, -np.inf
        for root in range(12):
            for quality in (MAJ, MIN):
                r = _pearson(profile, triad_template(root, quality))
                if r > best_r:
                    best, best_r = (root, quality), r
        entries.append(ChordEntry(bar, float(start), float(end - start),
                                  best[0], best[1]))
    return ChordProgression(tuple(entries), tuple(skipped))


# ---------------------------------------------------------------------------
# Condition tensors
# ---------------------------------------------------------------------------

def controls_to_condition(clip: AudioClip, *, frames: int = 1024,
                          n_mels: int = 64, hop_size: int = 160,
                          win_size: int = 1024, n_fft: int = 1024,
                          fmin: float = 50.0, fmax: float = 4000.0) -> np.ndarray:
    """Mel power tensor [frames, n_mels, 1] from rendered control audio."""
    if len(clip) == 0:
        raise EmptyInput("cannot build a condition from empty audio")
    mel = mel_spectrogram(clip, n_fft, win_size, hop_size, n_mels, fmin, fmax)
    if mel.shape[0] >= frames:
        mel = mel[:frames]
    else:
        mel = np.pad(mel, ((0, frames - mel.shape[0]), (0, 0)))
    return mel.astype(np.float32)[:, :, None]
