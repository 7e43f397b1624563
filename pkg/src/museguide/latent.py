"""Latent codec: mel power <-> normalized latent planes.

The generator denoises the mel spectrogram itself (identity "VAE"); these
two maps put mel power on a roughly unit scale for diffusion and back.
"""
from __future__ import annotations

import numpy as np

from .audio import AudioClip
from .config import PipelineConfig
from .dsp import mel_spectrogram, mel_to_audio
from .features import controls_to_condition


def mel_to_latent(mel: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """[T, M] or [N, T, M] mel power -> [N, 1, T, M] float32 latent."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim == 2:
        mel = mel[None]
    z = (np.log10(mel + cfg.mel_log_floor) - cfg.mel_log_center) / cfg.mel_log_scale
    return z.astype(np.float32)[:, None, :, :]


def latent_to_mel(z: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """[N, 1, T, M] latent -> [N, T, M] mel power (clipped non-negative)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 4:
        z = z[:, 0]
    mel = 10.0 ** (z * cfg.mel_log_scale + cfg.mel_log_center) - cfg.mel_log_floor
    return np.clip(mel, 0.0, None)


def clip_to_latent(clip: AudioClip, cfg: PipelineConfig) -> np.ndarray:
    """Audio -> [1, 1, frames, n_mels] latent at the configured geometry."""
    mel = mel_spectrogram(clip, cfg.n_fft, cfg.win_size, cfg.hop_size,
                          cfg.n_mels, cfg.mel_fmin, cfg.mel_fmax)
    if mel.shape[0] >= cfg.frames:
        mel = mel[: cfg.frames]
    else:
        mel = np.pad(mel, ((0, cfg.frames - mel.shape[0]), (0, 0)))
    return mel_to_latent(mel, cfg)


def condition_from_audio(clip: AudioClip, cfg: PipelineConfig,
                         frames: int | None = None) -> np.ndarray:
    """Rendered control audio -> [frames, n_mels, 1] mel condition tensor."""
    return controls_to_condition(
        clip, frames=frames or cfg.frames, n_mels=cfg.n_mels,
        hop_size=cfg.hop_size, win_size=cfg.win_size, n_fft=cfg.n_fft,
        fmin=cfg.mel_fmin, fmax=cfg.mel_fmax)


def latent_to_audio(z: np.ndarray, cfg: PipelineConfig, seed: int = 0) -> AudioClip:
    """Decode a latent to audio via mel inversion and Griffin-Lim."""
    mel = latent_to_mel(z, cfg)[0]
    return mel_to_audio(mel, cfg.sample_rate, cfg.n_fft, cfg.win_size,
                        cfg.hop_size, cfg.n_mels, cfg.mel_fmin, cfg.mel_fmax,
                        n_iters=cfg.gl_iters, seed=seed)
