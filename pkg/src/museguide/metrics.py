"""Controllability metrics: melody accuracy and pulse-based beat stability.

Melody accuracy counts matching pitch classes frame-by-frame against the
reference (reference rests excluded).  Beat stability is the variance of
inter-downbeat intervals, with downbeats taken from the peaks of a
predominant-local-pulse curve: per analysis window the dominant tempogram
component is re-synthesized as a windowed sinusoid and everything is
overlap-added, so the pulse bridges weak or missing onsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip
from .errors import InsufficientBeats, TooShort, UndefinedMetric
from .features import REST, extract_melody, onset_envelope

PLP_HOP = 128
PLP_WINDOW_SECONDS = 4.0
PLP_TEMPO_MIN = 40.0
PLP_TEMPO_MAX = 240.0
# detrend width must stay well above the slowest beat period (40 BPM = 1.5 s)
PLP_TREND_SECONDS = 2.5


def melody_accuracy(gen: AudioClip, ref: AudioClip) -> float:
    """Fraction of voiced reference frames whose pitch class matches."""
    mg = extract_melody(gen)
    mr = extract_melody(ref)
    n = min(mg.n_frames, mr.n_frames)
    g = mg.classes[:n]
    r = mr.classes[:n]
    voiced = r != REST
    if not np.any(voiced):
        raise UndefinedMetric("reference is entirely unvoiced")
    return float(np.mean(g[voiced] == r[voiced]))


def plp(clip: AudioClip, hop_size: int = PLP_HOP,
        window_seconds: float = PLP_WINDOW_SECONDS) -> tuple[np.ndarray, float]:
    """Predominant-local-pulse curve and its frame rate.

    Onset envelope -> short-time Fourier tempogram -> per-window dominant
    tempo/phase sinusoid kernels -> overlap-add -> half-wave rectify.
    """
    if clip.duration < 2.0:
        raise TooShort(f"need >= 2 s, got {clip.duration:.2f} s")
    env, fps = onset_envelope(clip, hop_size=hop_size, win_size=1024)
    n = len(env)
    if env.max() <= 1e-10:
        return np.zeros(n), fps
    env = env / env.max()
    # remove the slow trend so the tempogram sees the rhythmic component
    width = max(3, int(round(PLP_TREND_SECONDS * fps)) | 1)
    kernel = np.ones(width) / width
    trend = np.convolve(np.pad(env, width // 2, mode="edge"), kernel, "valid")[:n]
    nov = env - trend

    w = int(round(window_seconds * fps))
    w = min(w if w % 2 == 0 else w + 1, n - n % 2)
    w = max(w, 4)
    half = w // 2
    hop_w = max(1, w // 16)
    window = np.hanning(w)

    tempi = np.arange(PLP_TEMPO_MIN, PLP_TEMPO_MAX + 0.5, 1.0)
    freqs = tempi / 60.0
    # log-normal tempo prior breaks the octave ambiguity of onset trains
    prior = np.exp(-0.5 * (np.log2(tempi / 120.0)) ** 2)
    k = np.arange(w) - half
    basis = np.exp(-2j * np.pi * freqs[None, :] * k[:, None] / fps)  # [w, F]

    centers = np.arange(half, n - half, hop_w)
    if len(centers) == 0:
        centers = np.array([n // 2])
    curve = np.zeros(n)
    for c in centers:
        seg = nov[c - half : c - half + w] * window
        coeff = seg @ basis  # [F]
        best = int(np.argmax(np.abs(coeff) * prior))
        f = freqs[best]
        # kernel phase anchored in absolute time
        phase_shift = np.exp(-2j * np.pi * f * c / fps)
        phi = np.angle(coeff[best] * phase_shift)
        m = np.arange(c - half, c - half + w)
        curve[c - half : c - half + w] += window * np.cos(
            2 * np.pi * f * m / fps - phi)
    return np.maximum(curve, 0.0), fps


def plp_peaks(curve: np.ndarray, fps: float) -> tuple[np.ndarray, np.ndarray]:
    """Peak times (sub-frame, seconds) and peak heights of a PLP curve."""
    if curve.max() <= 0:
        return np.zeros(0), np.zeros(0)
    c = curve
    idx = np.where((c[1:-1] > c[:-2]) & (c[1:-1] >= c[2:]) &
                   (c[1:-1] > 0.1 * c.max()))[0] + 1
    times = []
    for i in idx:
        denom = c[i - 1] - 2 * c[i] + c[i + 1]
        delta = 0.0 if abs(denom) < 1e-12 else \
            float(np.clip(0.5 * (c[i - 1] - c[i + 1]) / denom, -0.5, 0.5))
        times.append((i + delta) / fps)
    return np.array(times), c[idx]


def beat_stability(clip: AudioClip) -> float:
    """Population variance (s^2) of intervals between PLP downbeats.

    Downbeats are every 4th pulse peak, anchored at the strongest peak.
    """
    curve, fps = plp(clip)
    times, heights = plp_peaks(curve, fps)
    if len(times) < 3:
        raise InsufficientBeats(f"only {len(times)} pulse peaks")
    anchor = int(np.argmax(heights))
    down = times[anchor % 4 :: 4]
    if len(down) < 3:
        raise InsufficientBeats(
            f"only {len(down)} downbeats from {len(times)} peaks")
    intervals = np.diff(down)
    return float(np.var(intervals))


# ---------------------------------------------------------------------------
# Corpus aggregation
# ---------------------------------------------------------------------------

@dataclass
class ClipResult:
    name: str
    melody_accuracy: float | None = None
    beat_stability: float | None = None
    error: str | None = None


@dataclass
class ControllabilityReport:
    clips: list = field(default_factory=list)

    def _values(self, attr):
        return [getattr(c, attr) for c in self.clips if getattr(c, attr) is not None]

    def summary(self) -> dict:
        out = {"schema": "report/v1", "n_clips": len(self.clips)}
        for attr in ("melody_accuracy", "beat_stability"):
            vals = self._values(attr)
            out[attr] = {
                "n": len(vals),
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
            }
        out["clips"] = [
            {"name": c.name, "melody_accuracy": c.melody_accuracy,
             "beat_stability": c.beat_stability, "error": c.error}
            for c in self.clips
        ]
        return out


def evaluate_pair(name: str, gen: AudioClip, ref: AudioClip) -> ClipResult:
    """Per-clip metrics; metric-undefined cases are absent, not zero."""
    result = ClipResult(name)
    try:
        result.melody_accuracy = melody_accuracy(gen, ref)
    except UndefinedMetric as exc:
        result.error = str(exc)
    try:
        result.beat_stability = beat_stability(gen)
    except (InsufficientBeats, TooShort) as exc:
        result.error = (result.error + "; " if result.error else "") + str(exc)
    return result


def evaluate_corpus(pairs) -> ControllabilityReport:
    """pairs: iterable of (name, generated AudioClip, reference AudioClip)."""
    report = ControllabilityReport()
    for name, gen, ref in pairs:
        report.clips.append(evaluate_pair(name, gen, ref))
    return report
