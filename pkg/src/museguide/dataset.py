"""Dataset manifests, the ingest cache, and the procedural training corpus.

A manifest is a JSON list of wav entries with optional captions, section
labels and instrument-label sidecars.  Ingest resamples everything to 16 kHz
mono at the configured clip length and caches the result keyed by content
hash.  ``build_synthetic_corpus`` procedurally renders the small training
sets used at desk scale: strummed chord beds, a melody line, and a click
layer on the beat grid.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, fit_length, mix, read_wav, resample, write_wav
from .config import PipelineConfig
from .errors import IngestError
from .features import MAJ, MIN, ChordEntry, ChordProgression
from .synth import BUILTIN_PROFILES, PEAK, synthesize_note

CACHE_ENV = "MUSEGUIDE_CACHE_DIR"
THREADS_ENV = "MUSEGUIDE_THREADS"

SECTIONS = ("intro", "chorus", "outro")


@dataclass(frozen=True)
class ManifestEntry:
    wav: str
    caption: str | None = None
    section: str | None = None
    instrument_labels: str | None = None
    genre: str | None = None

    def resolved_caption(self) -> str:
        if self.caption:
            return self.caption
        return f"generate a {self.genre or 'instrumental'} music"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "root", Path(self.root))
        for e in self.entries:
            if e.section is not None and e.section not in SECTIONS:
                raise IngestError(f"unknown section label {e.section!r}")

    def wav_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.wav)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {
            "schema": "manifest/v1",
            "entries": [
                {k: v for k, v in (
                    ("wav", e.wav), ("caption", e.caption),
                    ("section", e.section),
                    ("instrument_labels", e.instrument_labels),
                    ("genre", e.genre)) if v is not None}
                for e in self.entries
            ],
        }

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except FileNotFoundError as exc:
            raise IngestError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise IngestError(f"manifest does not parse: {path}: {exc}") from exc
        entries = tuple(
            ManifestEntry(e["wav"], e.get("caption"), e.get("section"),
                          e.get("instrument_labels"), e.get("genre"))
            for e in obj["entries"])
        return DatasetManifest(entries, path.parent)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


@dataclass(frozen=True)
class IngestedClip:
    entry: ManifestEntry
    clip: AudioClip
    caption: str
    cache_path: Path


def _cache_dir(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "museguide"))


def _worker_count() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def ingest(manifest_path, cfg: PipelineConfig,
           cache_dir=None) -> list[IngestedClip]:
    """Resample/trim every manifest entry to the configured clip geometry.

    Results are cached by (file content, geometry) hash; re-ingesting
    unchanged inputs is a no-op that reuses the cached samples bit-exactly.
    """
    manifest = manifest_path if isinstance(manifest_path, DatasetManifest) \
        else DatasetManifest.load(manifest_path)
    cache = _cache_dir(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)

    def load_one(entry: ManifestEntry) -> IngestedClip:
        wav = manifest.wav_path(entry)
        if not wav.exists():
            raise IngestError(f"missing file: {wav}")
        raw = wav.read_bytes()
        key = hashlib.sha256()
        key.update(raw)
        key.update(f"|sr={cfg.sample_rate}|n={cfg.clip_samples}".encode())
        digest = key.hexdigest()
        npy = cache / f"{digest}.npy"
        meta = cache / f"{digest}.json"
        if npy.exists() and meta.exists():
            with open(meta) as fh:
                info = json.load(fh)
            if info["n_samples"] != cfg.clip_samples or \
                    info["sample_rate"] != cfg.sample_rate:
                raise IngestError(f"cache collision for {wav}")
            samples = np.load(npy)
        else:
            clip = read_wav(wav)
            clip = resample(clip, cfg.sample_rate)
            clip = fit_length(clip, cfg.clip_samples)
            samples = clip.samples
            np.save(npy, samples)
            with open(meta, "w") as fh:
                json.dump({"source": str(wav), "n_samples": cfg.clip_samples,
                           "sample_rate": cfg.sample_rate}, fh)
        return IngestedClip(entry, AudioClip(samples, cfg.sample_rate),
                            entry.resolved_caption(), npy)

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        return list(pool.map(load_one, manifest.entries))


# ---------------------------------------------------------------------------
# Procedural corpus
# ---------------------------------------------------------------------------

# degree pools per mode: (root offset, quality)
_MAJOR_DEGREES = [(0, MAJ), (5, MAJ), (7, MAJ), (9, MIN)]
_MINOR_DEGREES = [(0, MIN), (3, MAJ), (7, MIN), (10, MAJ)]


def random_progression(rng: np.random.Generator, key_root: int, minor: bool,
                       n_bars: int, bar_seconds: float) -> ChordProgression:
    pool = _MINOR_DEGREES if minor else _MAJOR_DEGREES
    entries = []
    for bar in range(n_bars):
        off, quality = pool[rng.integers(0, len(pool))] if bar % 4 else pool[0]
        entries.append(ChordEntry(bar, bar * bar_seconds, bar_seconds,
                                  (key_root + off) % 12, quality))
    return ChordProgression(tuple(entries))


def _strummed_chords(prog: ChordProgression, beats_per_bar: int,
                     profile, sample_rate: int) -> AudioClip:
    """Chord bed re-struck on every beat so the beat grid is audible."""
    end = max(e.start + e.duration for e in prog.entries)
    out = np.zeros(int(round(end * sample_rate)))
    for e in prog.entries:
        beat = e.duration / beats_per_bar
        third = 4 if e.quality == MAJ else 3
        for b in range(beats_per_bar):
            t0 = e.start + b * beat
            notes = []
            for off in (0, third, 7):
                pc = (e.root + off) % 12
                oc = 3 + (e.root + off) // 12
                notes.append(synthesize_note(pc, oc, beat, profile, sample_rate))
            chord = mix(notes, peak=0.6 if b else 0.75)  # accent the downbeat
            lo = int(round(t0 * sample_rate))
            hi = min(len(out), lo + len(chord))
            out[lo:hi] += chord.samples[: hi - lo]
    return AudioClip(out, sample_rate)


def random_melody_line(rng: np.random.Generator,
                       prog: ChordProgression, note_seconds: float,
                       profile, sample_rate: int) -> AudioClip:
    """Melody walking chord tones (octave 4) with occasional passing notes."""
    end = max(e.start + e.duration for e in prog.entries)
    out = np.zeros(int(round(end * sample_rate)))
    t = 0.0
    while t < end - 1e-6:
        bar = next((e for e in prog.entries
                    if e.start <= t < e.start + e.duration), prog.entries[-1])
        third = 4 if bar.quality == MAJ else 3
        tones = [(bar.root + off) % 12 for off in (0, third, 7)]
        if rng.random() < 0.2:
            pc = int((tones[0] + rng.integers(0, 12)) % 12)
        else:
            pc = int(tones[rng.integers(0, 3)])
        dur = note_seconds * (2 if rng.random() < 0.25 else 1)
        dur = min(dur, end - t)
        note = synthesize_note(pc, 4, dur, profile, sample_rate)
        lo = int(round(t * sample_rate))
        hi = min(len(out), lo + len(note))
        out[lo:hi] += note.samples[: hi - lo]
        t += dur
    return AudioClip(out, sample_rate)


def _click_layer(n_samples: int, beat_seconds: float,
                 sample_rate: int) -> AudioClip:
    out = np.zeros(n_samples)
    t = 0.0
    while True:
        i = int(round(t * sample_rate))
        if i >= n_samples - 24:
            break
        # 1.5 ms noise burst reads as a percussive tick
        out[i : i + 24] += np.hanning(24) * 0.9
        t += beat_seconds
    return AudioClip(out, sample_rate)


@dataclass(frozen=True)
class SyntheticPiece:
    clip: AudioClip
    progression: ChordProgression
    tempo_bpm: int
    minor: bool
    melody_profile: str


def make_synthetic_piece(rng: np.random.Generator, cfg: PipelineConfig,
                         seconds: float | None = None,
                         section: str | None = None) -> SyntheticPiece:
    sr = cfg.sample_rate
    seconds = seconds or cfg.clip_seconds
    tempo = int(rng.integers(100, 141))
    beat = 60.0 / tempo
    bar_seconds = 4 * beat
    n_bars = max(1, int(np.ceil(seconds / bar_seconds)))
    key_root = int(rng.integers(0, 12))
    minor = bool(rng.random() < 0.4)
    prog = random_progression(rng, key_root, minor, n_bars, bar_seconds)

    melody_name = ("sine", "violin", "ukulele")[rng.integers(0, 3)]
    chords_gain, melody_gain, click_gain = 0.5, 0.9, 0.35
    if section == "intro":
        chords_gain, click_gain = 0.15, 0.1      # sparse opening
    elif section == "outro":
        melody_gain, click_gain = 0.3, 0.15      # chordal fade

    layers = [
        _strummed_chords(prog, 4, BUILTIN_PROFILES["piano"], sr).scaled(chords_gain),
        random_melody_line(rng, prog, 2 * beat / 4, BUILTIN_PROFILES[melody_name],
                           sr).scaled(melody_gain),
    ]
    n = int(round(seconds * sr))
    layers.append(_click_layer(n, beat, sr).scaled(click_gain))
    clip = mix(layers, peak=PEAK)
    if section == "outro":
        fade = np.linspace(1.0, 0.2, len(clip))
        clip = AudioClip(clip.samples * fade, sr)
    clip = fit_length(clip, n)
    return SyntheticPiece(clip, prog, tempo, minor, melody_name)


def build_synthetic_corpus(out_dir, cfg: PipelineConfig, n_clips: int,
                           seed: int = 0, sections: bool = False,
                           with_instrument_labels: bool = False) -> Path:
    """Render a labelled corpus; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_clips):
        section = SECTIONS[i % 3] if sections else None
        piece = make_synthetic_piece(rng, cfg, section=section)
        name = f"clip_{i:03d}.wav"
        write_wav(out_dir / name, piece.clip)
        labels_path = None
        if with_instrument_labels:
            labels_path = f"clip_{i:03d}.labels.json"
            with open(out_dir / labels_path, "w") as fh:
                json.dump({"labels": [
                    {"name": piece.melody_profile, "confidence": 0.9},
                    {"name": "piano", "confidence": 0.6},
                ]}, fh)
        caption = f"generate a {'minor' if piece.minor else 'major'} synthetic music"
        caption = caption + f", at {piece.tempo_bpm} BPM"
        entries.append(ManifestEntry(name, caption, section, labels_path,
                                     genre="synthetic"))
    manifest = DatasetManifest(tuple(entries), out_dir)
    path = out_dir / "manifest.json"
    manifest.save(path)
    return path
