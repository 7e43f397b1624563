"""Additive rendering of melody tracks and chord progressions.

Timbre profiles stand in for soundfonts: a list of relative partial
amplitudes plus an ADSR envelope.  Four built-ins cover the instrument
labels we expect from upstream classifiers; unknown labels fall back to
the closest name.
"""
from __future__ import annotations

import difflib
import json
from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, mix
from .errors import EmptyInput, InvalidAudio, PitchOutOfRange
from .features import MAJ, REST, ChordProgression, MelodyTrack

PEAK = 0.8
F0_MIN = 30.0
F0_MAX = 4000.0


@dataclass(frozen=True)
class TimbreProfile:
    """Relative partial amplitudes (max normalized to 1) and ADSR envelope."""

    name: str
    harmonic_amps: tuple[float, ...]
    adsr: tuple[float, float, float, float]  # attack s, decay s, sustain level, release s

    def __post_init__(self):
        amps = tuple(float(a) for a in self.harmonic_amps)
        if not amps or any(a < 0 for a in amps):
            raise InvalidAudio("harmonic amplitudes must be non-negative")
        peak = max(amps)
        if peak <= 0:
            raise InvalidAudio("at least one partial must be non-zero")
        object.__setattr__(self, "harmonic_amps", tuple(a / peak for a in amps))
        a, d, s, r = self.adsr
        if a < 0 or d < 0 or r < 0 or not 0 <= s <= 1:
            raise InvalidAudio("bad ADSR parameters")


SINE = TimbreProfile("sine", (1.0,), (0.01, 0.05, 0.9, 0.05))
PIANO = TimbreProfile("piano", (1.0, 0.55, 0.32, 0.2, 0.12, 0.07),
                      (0.005, 0.25, 0.45, 0.15))
VIOLIN = TimbreProfile("violin", (1.0, 0.3, 0.45, 0.12, 0.2, 0.05, 0.1),
                       (0.12, 0.1, 0.85, 0.2))
UKULELE = TimbreProfile("ukulele", (1.0, 0.6, 0.2, 0.08),
                        (0.003, 0.12, 0.25, 0.08))

BUILTIN_PROFILES = {p.name: p for p in (SINE, PIANO, VIOLIN, UKULELE)}


@dataclass(frozen=True)
class InstrumentLabelSet:
    """Non-overlapping instrument labels with confidences."""

    labels: tuple[tuple[str, float], ...]

    def __post_init__(self):
        labels = tuple((str(n), float(c)) for n, c in self.labels)
        names = [n for n, _ in labels]
        if len(set(names)) != len(names):
            raise InvalidAudio("instrument labels must be distinct")
        if any(not np.isfinite(c) for _, c in labels):
            raise InvalidAudio("confidences must be finite")
        object.__setattr__(self, "labels", labels)

    def best(self) -> str:
        if not self.labels:
            raise EmptyInput("label set is empty")
        return max(self.labels, key=lambda nc: nc[1])[0]

    @staticmethod
    def from_json(obj: dict) -> "InstrumentLabelSet":
        return InstrumentLabelSet(tuple(
            (e["name"], e["confidence"]) for e in obj["labels"]))

    @staticmethod
    def load(path) -> "InstrumentLabelSet":
        with open(path) as fh:
            return InstrumentLabelSet.from_json(json.load(fh))


def profile_for_label(label: str) -> TimbreProfile:
    """Exact, then fuzzy, nearest-name profile lookup."""
    key = label.strip().lower()
    if key in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[key]
    close = difflib.get_close_matches(key, BUILTIN_PROFILES.keys(), n=1, cutoff=0.0)
    return BUILTIN_PROFILES[close[0]]


def profile_for_labels(labels: InstrumentLabelSet) -> TimbreProfile:
    """Highest-confidence label wins when several instruments are present."""
    return profile_for_label(labels.best())


def _adsr_envelope(n: int, adsr, sample_rate: int) -> np.ndarray:
    attack, decay, sustain, release = adsr
    na = int(attack * sample_rate)
    nd = int(decay * sample_rate)
    nr = int(release * sample_rate)
    # squeeze segments proportionally when the note is shorter than A+D+R
    if na + nd + nr > n:
        scale = n / max(1, na + nd + nr)
        na, nd, nr = int(na * scale), int(nd * scale), int(nr * scale)
    ns = max(0, n - na - nd - nr)
    env = np.concatenate([
        np.linspace(0.0, 1.0, max(na, 1), endpoint=False) if na else np.zeros(0),
        np.linspace(1.0, sustain, max(nd, 1), endpoint=False) if nd else np.zeros(0),
        np.full(ns, sustain),
        np.linspace(sustain, 0.0, max(nr, 1)) if nr else np.zeros(0),
    ])
    if len(env) < n:
        env = np.pad(env, (0, n - len(env)))
    return env[:n]


def pitch_to_freq(pitch_class: int, octave: int) -> float:
    return 440.0 * 2.0 ** ((pitch_class - 9) / 12.0 + (octave - 4))


def synthesize_note(pitch_class: int, octave: int, duration: float,
                    profile: TimbreProfile = SINE,
                    sample_rate: int = 16000) -> AudioClip:
    """One additively synthesized, ADSR-enveloped note, peak 0.8."""
    if duration <= 0:
        raise EmptyInput(f"duration must be positive, got {duration}")
    if not 0 <= pitch_class < 12:
        raise PitchOutOfRange(f"pitch class {pitch_class} outside 0..11")
    f0 = pitch_to_freq(pitch_class, octave)
    if not F0_MIN <= f0 <= F0_MAX:
        raise PitchOutOfRange(f"f0 {f0:.1f} Hz outside [{F0_MIN}, {F0_MAX}]")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    wave = np.zeros(n)
    for h, amp in enumerate(profile.harmonic_amps, start=1):
        fh = h * f0
        if fh > sample_rate / 2:
            break
        wave += amp * np.sin(2 * np.pi * fh * t)
    wave *= _adsr_envelope(n, profile.adsr, sample_rate)
    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= PEAK / peak
    return AudioClip(wave, sample_rate)


def render_melody(track: MelodyTrack, profile: TimbreProfile = SINE,
                  octave: int = 4) -> AudioClip:
    """Rendered melody: contiguous runs become notes, REST becomes silence."""
    if track.n_frames == 0:
        raise EmptyInput("melody track is empty")
    sr = track.sample_rate
    frame_len = track.hop_size
    out = np.zeros(track.n_frames * frame_len)
    classes = track.classes
    start = 0
    for i in range(1, track.n_frames + 1):
        if i < track.n_frames and classes[i] == classes[start]:
            continue
        if classes[start] != REST:
            dur = (i - start) * frame_len / sr
            note = synthesize_note(int(classes[start]), octave, dur, profile, sr)
            lo = start * frame_len
            out[lo : lo + len(note)] = note.samples[: len(out) - lo]
        start = i
    return AudioClip(out, sr)


def render_chords(prog: ChordProgression, profile: TimbreProfile = SINE,
                  octave: int = 3, sample_rate: int = 16000) -> AudioClip:
    """Rendered progression: each bar's triad as simultaneous enveloped notes."""
    if not prog.entries:
        raise EmptyInput("chord progression is empty")
    end = max(e.start + e.duration for e in prog.entries)
    out = np.zeros(int(round(end * sample_rate)))
    for e in prog.entries:
        third = 4 if e.quality == MAJ else 3
        notes = []
        for offset in (0, third, 7):
            pc = (e.root + offset) % 12
            oct_shift = (e.root + offset) // 12
            notes.append(synthesize_note(pc, octave + oct_shift, e.duration,
                                         profile, sample_rate))
        bar = mix(notes, peak=PEAK)
        lo = int(round(e.start * sample_rate))
        hi = min(len(out), lo + len(bar))
        out[lo:hi] += bar.samples[: hi - lo]
    peak = np.max(np.abs(out))
    if peak > PEAK:
        out *= PEAK / peak
    return AudioClip(out, sample_rate)
