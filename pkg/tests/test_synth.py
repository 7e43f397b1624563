import numpy as np
import pytest

from museguide.audio import AudioClip
from museguide.errors import EmptyInput, PitchOutOfRange
from museguide.features import (
    MAJ,
    MIN,
    REST,
    BeatGrid,
    ChordEntry,
    ChordProgression,
    MelodyTrack,
    estimate_chords,
    extract_melody,
)
from museguide.synth import (
    BUILTIN_PROFILES,
    SINE,
    InstrumentLabelSet,
    TimbreProfile,
    profile_for_label,
    profile_for_labels,
    render_chords,
    render_melody,
    synthesize_note,
)

SR = 16000


def dft_mag(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    return np.abs(basis @ frame)


class TestSynthesizeNote:
    def test_a4_peak_bin(self):
        note = synthesize_note(9, 4, 1.0, SINE, SR)
        frame = note.samples[4096 : 4096 + 2048]
        mags = dft_mag(frame)
        peak = int(np.argmax(mags))
        assert abs(peak - round(440 * 2048 / SR)) <= 1

    def test_zero_duration_rejected(self):
        with pytest.raises(EmptyInput):
            synthesize_note(0, 4, 0.0)

    def test_two_partial_ratio(self):
        profile = TimbreProfile("t", (1.0, 0.5), (0.005, 0.005, 1.0, 0.005))
        note = synthesize_note(9, 3, 1.0, profile, SR)  # 220 Hz
        frame = note.samples[4096 : 4096 + 4096]
        mags = dft_mag(frame)
        b220 = round(220 * 4096 / SR)
        b440 = round(440 * 4096 / SR)
        p1 = mags[b220 - 1 : b220 + 2].max()
        p2 = mags[b440 - 1 : b440 + 2].max()
        assert p1 / p2 == pytest.approx(2.0, rel=0.1)

    def test_out_of_range_pitch(self):
        with pytest.raises(PitchOutOfRange):
            synthesize_note(0, 9, 1.0)  # ~4186 Hz > 4 kHz
        with pytest.raises(PitchOutOfRange):
            synthesize_note(0, 0, 1.0)  # ~16 Hz < 30 Hz

    def test_peak_normalized(self):
        note = synthesize_note(4, 4, 0.5)
        assert np.max(np.abs(note.samples)) == pytest.approx(0.8, abs=1e-6)


class TestRenderMelody:
    def test_all_rest_is_silence(self):
        track = MelodyTrack(np.full(10, REST), 2048, SR)
        clip = render_melody(track)
        assert len(clip) == 10 * 2048
        assert np.all(clip.samples == 0)

    def test_single_run_roundtrip(self):
        n = int(2.0 * SR / 2048)
        track = MelodyTrack(np.full(n, 9), 2048, SR)
        clip = render_melody(track)
        again = extract_melody(clip)
        voiced = again.classes != REST
        assert np.mean(again.classes[voiced] == 9) >= 0.95

    def test_alternating_runs_roundtrip(self):
        runs = [9] * 8 + [0] * 8 + [9] * 8
        track = MelodyTrack(np.array(runs), 2048, SR)
        clip = render_melody(track)
        again = extract_melody(clip)
        n = min(track.n_frames, again.n_frames)
        ref, got = track.classes[:n], again.classes[:n]
        voiced = got != REST
        agreement = np.mean(ref[voiced] == got[voiced])
        assert agreement >= 0.95

    def test_duration_matches(self):
        track = MelodyTrack(np.array([4] * 5 + [REST] * 3), 2048, SR)
        clip = render_melody(track)
        assert len(clip) == 8 * 2048

    def test_empty_track_rejected(self):
        with pytest.raises(EmptyInput):
            render_melody(MelodyTrack(np.zeros(0, dtype=np.int64), 2048, SR))


def one_bar(root, quality, seconds=2.0):
    return ChordProgression((ChordEntry(0, 0.0, seconds, root, quality),))


class TestRenderChords:
    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            render_chords(ChordProgression(()))

    def test_c_major_roundtrip(self):
        clip = render_chords(one_bar(0, MAJ))
        grid = BeatGrid(np.arange(4) * 0.5, np.array([0]), 120.0)
        prog = estimate_chords(clip, grid)
        assert (prog.entries[0].root, prog.entries[0].quality) == (0, MAJ)

    def test_two_bar_roundtrip(self):
        prog = ChordProgression((
            ChordEntry(0, 0.0, 2.0, 0, MAJ),
            ChordEntry(1, 2.0, 2.0, 7, MAJ),
        ))
        clip = render_chords(prog)
        grid = BeatGrid(np.arange(8) * 0.5, np.array([0, 4]), 120.0)
        again = estimate_chords(clip, grid)
        assert [(e.root, e.quality) for e in again.entries] == [(0, MAJ), (7, MAJ)]

    @pytest.mark.parametrize("root", range(12))
    @pytest.mark.parametrize("quality", [MAJ, MIN])
    def test_all_triads_roundtrip(self, root, quality):
        clip = render_chords(one_bar(root, quality))
        grid = BeatGrid(np.arange(4) * 0.5, np.array([0]), 120.0)
        prog = estimate_chords(clip, grid)
        assert (prog.entries[0].root, prog.entries[0].quality) == (root, quality)

    def test_peak_bounded_no_nan(self):
        prog = ChordProgression(tuple(
            ChordEntry(i, i * 1.0, 1.0, (i * 5) % 12, MAJ if i % 2 else MIN)
            for i in range(4)))
        clip = render_chords(prog)
        assert np.all(np.isfinite(clip.samples))
        assert np.max(np.abs(clip.samples)) <= 0.8 + 1e-6


class TestProfiles:
    def test_four_builtins(self):
        assert set(BUILTIN_PROFILES) == {"sine", "piano", "violin", "ukulele"}

    def test_amps_normalized(self):
        for p in BUILTIN_PROFILES.values():
            assert max(p.harmonic_amps) == pytest.approx(1.0)

    def test_nearest_name_fallback(self):
        assert profile_for_label("violins").name == "violin"
        assert profile_for_label("grand piano").name == "piano"

    def test_label_set_best(self):
        labels = InstrumentLabelSet((("violin", 0.91), ("piano", 0.4)))
        assert labels.best() == "violin"
        assert profile_for_labels(labels).name == "violin"

    def test_label_json(self):
        obj = {"labels": [{"name": "ukulele", "confidence": 0.8}]}
        labels = InstrumentLabelSet.from_json(obj)
        assert labels.best() == "ukulele"
