import numpy as np
import pytest

from museguide.audio import AudioClip
from museguide.dsp import (
    Chromagram,
    Spectrogram,
    chromagram,
    hpss,
    median_smooth_time,
    mel_spectrogram,
    mel_to_audio,
    nn_smooth,
    stft,
)
from museguide.errors import (
    EmptyInput,
    InvalidAudio,
    InvalidWidth,
    KernelTooLarge,
    KTooLarge,
)

SR = 16000


def sine(freq, duration=1.0, amp=0.8, sr=SR):
    t = np.arange(int(sr * duration)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def dft_oracle(frame):
    """Direct O(N^2) DFT magnitudes, independent of np.fft."""
    n = len(frame)
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    return np.abs(basis @ frame)


def class_of_freq_oracle(f):
    """Equal-temperament mapping oracle: A4=440 -> 9, C=0."""
    return int(round(12 * np.log2(f / 440.0)) + 9) % 12


class TestStft:
    def test_silence_is_zero(self):
        clip = AudioClip(np.zeros(SR), SR)
        spec = stft(clip, 2048, 512)
        assert np.all(spec.magnitudes == 0.0)

    def test_sine_peak_bin_matches_dft_oracle(self):
        clip = sine(440.0)
        spec = stft(clip, 2048, 2048, window="rect", center=False)
        # oracle: direct DFT of one interior frame
        frame = clip.samples[2048:4096]
        oracle_bin = int(np.argmax(dft_oracle(frame)))
        assert oracle_bin == round(440 * 2048 / 16000) == 56
        assert int(np.argmax(spec.magnitudes[1])) == oracle_bin

    def test_two_sines_two_dominant_bins(self):
        t = np.arange(SR) / SR
        clip = AudioClip(0.4 * np.sin(2 * np.pi * 440 * t)
                         + 0.4 * np.sin(2 * np.pi * 880 * t), SR)
        spec = stft(clip, 2048, 2048, window="rect", center=False)
        frame = clip.samples[:2048]
        oracle = dft_oracle(frame)
        top2 = set(np.argsort(-oracle)[:2])
        assert top2 == {56, 113}
        for row in spec.magnitudes:
            med = np.median(row)
            assert row[56] > 10 * med and row[113] > 10 * med

    def test_parseval_energy_rect_window(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.5, 0.5, size=SR)
        clip = AudioClip(x, SR)
        n = 1024
        spec = stft(clip, n, n, window="rect", center=False)
        # one-sided spectrum: double all bins except DC and Nyquist
        sq = spec.magnitudes ** 2
        spec_energy = (2 * sq.sum() - sq[:, 0].sum() - sq[:, -1].sum()) / n
        n_frames = spec.n_frames
        time_energy = np.sum(x[: n_frames * n] ** 2)
        assert abs(spec_energy - time_energy) / time_energy < 0.01

    def test_sine_energy_concentration(self):
        clip = sine(440.0)
        spec = stft(clip, 2048, 2048, window="rect", center=False)
        row = spec.magnitudes[1] ** 2
        near = row[55:58].sum()
        assert near / row.sum() >= 0.80

    def test_empty_clip_raises(self):
        with pytest.raises(EmptyInput):
            stft(AudioClip(np.zeros(0), SR), 1024, 512)

    def test_nonfinite_samples_rejected(self):
        with pytest.raises(InvalidAudio):
            AudioClip(np.array([0.0, np.nan]), SR)

    def test_pure_function_determinism(self):
        clip = sine(523.25, 0.5)
        a = stft(clip, 1024, 256).magnitudes
        b = stft(clip, 1024, 256).magnitudes
        assert a.tobytes() == b.tobytes()


class TestChromagram:
    @pytest.mark.parametrize("octave", [3, 4, 5])
    @pytest.mark.parametrize("cls", range(12))
    def test_pure_tone_class(self, octave, cls):
        f0 = 440.0 * 2 ** ((cls - 9) / 12 + (octave - 4))
        assert class_of_freq_oracle(f0) == cls
        ch = chromagram(sine(f0))
        votes = ch.energies.argmax(axis=1)
        assert np.mean(votes == cls) >= 0.95

    def test_row_count_always_12(self):
        ch = chromagram(sine(440.0, 0.3))
        assert ch.energies.shape[1] == 12

    def test_c_major_triad_top3(self):
        t = np.arange(SR) / SR
        clip = AudioClip(sum(0.3 * np.sin(2 * np.pi * f * t)
                             for f in (261.63, 329.63, 392.00)), SR)
        expected = {class_of_freq_oracle(f) for f in (261.63, 329.63, 392.00)}
        assert expected == {0, 4, 7}
        ch = chromagram(clip)
        top3 = np.argsort(-ch.energies, axis=1)[:, :3]
        hits = np.mean([set(row) == expected for row in top3])
        assert hits >= 0.90

    def test_silence_all_zero(self):
        ch = chromagram(AudioClip(np.zeros(SR), SR))
        assert np.all(ch.energies == 0.0)


class TestHpss:
    def _sine_spec(self):
        return stft(sine(440.0, 2.0), 1024, 512)

    def test_steady_sine_mostly_harmonic(self):
        spec = self._sine_spec()
        h, p = hpss(spec, 17, 17)
        eh = np.sum(h.magnitudes ** 2)
        ep = np.sum(p.magnitudes ** 2)
        assert eh / (eh + ep) >= 0.90

    def test_click_mostly_percussive(self):
        x = np.zeros(SR)
        x[SR // 2] = 0.9
        spec = stft(AudioClip(x, SR), 1024, 512)
        h, p = hpss(spec, 17, 17)
        eh = np.sum(h.magnitudes ** 2)
        ep = np.sum(p.magnitudes ** 2)
        assert ep / (eh + ep) >= 0.90

    def test_uniform_spectrogram_tie(self):
        spec = Spectrogram(np.ones((20, 33)), 512, 1024, SR)
        h, p = hpss(spec, 5, 5)
        assert np.allclose(h.magnitudes, 0.5)
        assert np.allclose(p.magnitudes, 0.5)

    def test_masks_sum_to_one(self):
        rng = np.random.default_rng(7)
        spec = Spectrogram(rng.uniform(0, 2, size=(30, 65)), 512, 1024, SR)
        h, p = hpss(spec, 5, 9)
        with np.errstate(invalid="ignore"):
            total = np.where(spec.magnitudes > 0,
                             (h.magnitudes + p.magnitudes) / spec.magnitudes, 1.0)
        assert np.all(np.abs(total - 1.0) < 1e-6)

    def test_kernel_too_large(self):
        spec = Spectrogram(np.ones((5, 9)), 512, 1024, SR)
        with pytest.raises(KernelTooLarge):
            hpss(spec, 7, 3)
        with pytest.raises(KernelTooLarge):
            hpss(spec, 3, 11)


class TestMedianSmooth:
    def _chroma(self, rows):
        e = np.zeros((len(rows), 12))
        e[:, 0] = rows
        return Chromagram(e, 2048, SR)

    def test_width_one_identity(self):
        ch = self._chroma([0.1, 0.5, 0.9, 0.2])
        out = median_smooth_time(ch, 1)
        assert np.array_equal(out.energies, ch.energies)

    def test_isolated_spike_removed(self):
        # hand oracle: median of reflect-padded [0,0,1,0,0] width 3 is all zero
        ch = self._chroma([0, 0, 1, 0, 0])
        out = median_smooth_time(ch, 3)
        assert np.array_equal(out.energies[:, 0], np.zeros(5))

    def test_constant_row_unchanged(self):
        ch = self._chroma([0.4] * 6)
        out = median_smooth_time(ch, 3)
        assert np.allclose(out.energies[:, 0], 0.4)

    def test_idempotent_on_constant(self):
        ch = self._chroma([0.3] * 8)
        once = median_smooth_time(ch, 5)
        twice = median_smooth_time(once, 5)
        assert np.array_equal(once.energies, twice.energies)

    def test_even_width_rejected(self):
        with pytest.raises(InvalidWidth):
            median_smooth_time(self._chroma([0, 1, 0]), 2)


class TestNnSmooth:
    def test_k1_identity(self):
        rng = np.random.default_rng(3)
        ch = Chromagram(rng.uniform(0, 1, size=(10, 12)), 2048, SR)
        out = nn_smooth(ch, 1)
        assert np.allclose(out.energies, ch.energies)

    def test_two_orthogonal_clusters_unchanged(self):
        # cosine oracle: one-hot A frames have similarity 1 with A, 0 with B
        e = np.zeros((8, 12))
        e[0::2, 0] = 1.0
        e[1::2, 7] = 1.0
        ch = Chromagram(e, 2048, SR)
        out = nn_smooth(ch, 2)
        assert np.allclose(out.energies, e)

    def test_identical_frames_unchanged(self):
        e = np.tile(np.linspace(0, 1, 12), (6, 1))
        ch = Chromagram(e, 2048, SR)
        out = nn_smooth(ch, 4)
        assert np.allclose(out.energies, e)

    def test_k_too_large(self):
        ch = Chromagram(np.ones((3, 12)), 2048, SR)
        with pytest.raises(KTooLarge):
            nn_smooth(ch, 4)


class TestMelRoundTrip:
    def test_mel_shapes_and_reconstruction(self):
        clip = sine(440.0, 1.0)
        mel = mel_spectrogram(clip, 1024, 1024, 512, 64, 50.0, 2000.0)
        assert mel.shape[1] == 64
        assert np.all(mel >= 0)
        back = mel_to_audio(mel, SR, 1024, 1024, 512, 64, 50.0, 2000.0,
                            n_iters=16, seed=0)
        back = AudioClip(back.samples[: len(clip)], SR)
        ch = chromagram(back)
        votes = ch.energies.argmax(axis=1)
        # pitch class survives the mel bottleneck and Griffin-Lim
        assert np.mean(votes == 9) >= 0.9
