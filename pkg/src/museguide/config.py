"""Pipeline configuration: audio/mel geometry, model sizes, schedule, training.

Three presets:
  * ``default`` mirrors the published setup (10 s clips -> [1024, 64, 1] mel,
    unshuffle 4 to 256x16, 200 diffusion steps, Adam lr 1e-5, batch 16).
  * ``desk`` is the small config used for end-to-end training experiments on
    one CPU core (4.096 s clips -> [128, 64, 1]).
  * ``toy`` is the minimal config for fast contract tests ([64, 16, 1],
    unshuffle 2).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

from .errors import ShapeError


@dataclass(frozen=True)
class PipelineConfig:
    # audio / mel geometry
    sample_rate: int = 16000
    clip_seconds: float = 10.0
    n_fft: int = 1024
    win_size: int = 1024
    hop_size: int = 160
    n_mels: int = 64
    mel_fmin: float = 50.0
    mel_fmax: float = 4000.0
    frames: int = 1024
    # latent normalization (log10 mel -> roughly unit scale)
    mel_log_floor: float = 1e-5
    mel_log_center: float = -3.5
    mel_log_scale: float = 1.5
    # model
    unshuffle: int = 4
    channels: tuple = (32, 64, 128, 256)
    text_buckets: int = 128
    embed_dim: int = 64
    # diffusion schedule
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 6e-2
    # training
    lr: float = 1e-5
    batch_size: int = 16
    # reconstruction
    gl_iters: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) != 4:
            raise ShapeError("the denoiser uses exactly 4 encoder stages")
        if self.frames % self.unshuffle or self.n_mels % self.unshuffle:
            raise ShapeError(
                f"latent [{self.frames},{self.n_mels}] not divisible by "
                f"unshuffle={self.unshuffle}")
        if (self.frames // self.unshuffle) % 8:
            raise ShapeError("frames/unshuffle must survive three halvings")

    @property
    def latent_shape(self) -> tuple:
        return (self.frames, self.n_mels, 1)

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def latent_fps(self) -> float:
        return self.sample_rate / self.hop_size

    def stage_shapes(self) -> list:
        """Spatial dims of the 4 encoder stages, fine to coarse."""
        h, w = self.frames // self.unshuffle, self.n_mels // self.unshuffle
        shapes = []
        for _ in range(4):
            shapes.append((h, w))
            h = (h + 2 - 3) // 2 + 1
            w = (w + 2 - 3) // 2 + 1
        return shapes

    def frames_for_seconds(self, seconds: float) -> int:
        """Latent frame count for a duration, rounded to the UNet's granularity."""
        gran = self.unshuffle * 8
        raw = seconds * self.latent_fps
        return max(gran, int(round(raw / gran)) * gran)

    def to_json(self) -> dict:
        obj = {"schema": "config/v1"}
        obj.update(asdict(self))
        obj["channels"] = list(self.channels)
        return obj

    @staticmethod
    def from_json(obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        obj.pop("schema", None)
        preset = obj.pop("preset", None)
        base = PRESETS[preset]() if preset else PipelineConfig()
        if obj:
            base = replace(base, **obj)
        return base

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as fh:
            return PipelineConfig.from_json(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def default_config() -> PipelineConfig:
    return PipelineConfig()


def desk_config() -> PipelineConfig:
    """Small enough to train on one core, big enough to carry pitch content."""
    return PipelineConfig(
        clip_seconds=4.096,
        hop_size=512,
        frames=128,
        n_mels=64,
        mel_fmax=2000.0,
        channels=(16, 24, 32, 48),
        lr=2e-3,
        batch_size=8,
        gl_iters=24,
    )


def toy_config() -> PipelineConfig:
    """Contract-test config: latent [64, 16, 1], unshuffle 2."""
    return PipelineConfig(
        clip_seconds=2.048,
        hop_size=512,
        frames=64,
        n_mels=16,
        mel_fmax=2000.0,
        unshuffle=2,
        channels=(8, 12, 16, 24),
        timesteps=60,
        lr=1e-3,
        batch_size=4,
        gl_iters=8,
    )


PRESETS = {
    "default": default_config,
    "desk": desk_config,
    "toy": toy_config,
}
