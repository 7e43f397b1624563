"""Toy frozen-backbone latent diffusion with adapter injection.

The denoiser is a conv UNet over pixel-unshuffled mel latents whose four
encoder stages match the adapter's feature scales exactly.  Text conditioning
is a hashed bag-of-tokens embedding applied FiLM-style per stage; mode/tempo
global tags are plain prompt suffixes.  Training follows the usual
noise-prediction recipe; once the backbone is frozen only adapter parameters
ever move.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .adapter import AdapterGroup, ControlAdapter, MultiScaleFeatures, \
    group_combine, inject
from .audio import AudioClip
from .config import PipelineConfig
from .errors import ContractViolation, NotLoaded, ShapeError, StepError
from .latent import latent_to_audio

TIME_EMB_DIM = 32


# ---------------------------------------------------------------------------
# Schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta DDPM schedule; step index t runs 1..T (alpha_bar_0 == 1)."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise StepError("schedule needs at least one step")
        if not (0 < betas[0] <= betas[-1] < 1):
            raise StepError("betas must lie in (0,1) and be non-decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "_bars", np.cumprod(1.0 - betas))

    @staticmethod
    def linear(timesteps: int = 200, beta_start: float = 1e-4,
               beta_end: float = 2e-2) -> "DiffusionSchedule":
        return DiffusionSchedule(np.linspace(beta_start, beta_end, timesteps))

    @staticmethod
    def from_config(cfg: PipelineConfig) -> "DiffusionSchedule":
        return DiffusionSchedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def alpha(self, t):
        return 1.0 - self.betas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        """alpha_bar_t with the t=0 boundary equal to 1."""
        t = np.asarray(t)
        return np.where(t <= 0, 1.0, self._bars[np.clip(t, 1, self.timesteps) - 1])


def forward_diffuse(z0: np.ndarray, t, noise: np.ndarray,
                    sched: DiffusionSchedule) -> np.ndarray:
    """q(z_t | z_0) = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise; t in [1, T]."""
    z0 = np.asarray(z0)
    noise = np.asarray(noise)
    if z0.shape != noise.shape:
        raise ShapeError(f"noise shape {noise.shape} != z0 shape {z0.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 1) or np.any(t_arr > sched.timesteps):
        raise StepError(f"step(s) {t} outside [1, {sched.timesteps}]")
    ab = sched.alpha_bar(t_arr).astype(z0.dtype)
    while ab.ndim < z0.ndim:
        ab = ab[..., None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def ddpm_step(z: np.ndarray, eps_hat: np.ndarray, t: int,
              sched: DiffusionSchedule, noise: np.ndarray | None) -> np.ndarray:
    """One ancestral update z_t -> z_{t-1} given the noise estimate."""
    beta = sched.betas[t - 1]
    alpha = 1.0 - beta
    abar = sched.alpha_bar(t)
    mean = (z - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean.astype(z.dtype)
    var = (1.0 - sched.alpha_bar(t - 1)) / (1.0 - abar) * beta
    return (mean + np.sqrt(var) * noise).astype(z.dtype)


# ---------------------------------------------------------------------------
# Text conditioning
# ---------------------------------------------------------------------------

def append_global_tags(prompt: str, mode: str | None = None,
                       tempo_bpm: int | None = None) -> str:
    """Deterministic, idempotent mode/tempo suffixes for the free-text prompt."""
    out = prompt
    if mode is not None:
        part = f", in {mode} key"
        if part not in out:
            out += part
    if tempo_bpm is not None:
        part = f", at {int(tempo_bpm)} BPM"
        if part not in out:
            out += part
    return out


@dataclass(frozen=True)
class TextCondition:
    prompt: str = ""
    mode: str | None = None
    tempo_bpm: int | None = None

    def text(self) -> str:
        return append_global_tags(self.prompt, self.mode, self.tempo_bpm)


def embed_text(text: str, buckets: int) -> np.ndarray:
    """Hashed bag-of-tokens vector (crc32, stable across processes)."""
    tokens = re.findall(r"[a-z0-9#]+", text.lower())
    vec = np.zeros(buckets, dtype=np.float32)
    for tok in tokens:
        vec[zlib.crc32(tok.encode()) % buckets] += 1.0
    if tokens:
        vec /= len(tokens)
    return vec


def _time_embedding(t: np.ndarray, dim: int = TIME_EMB_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(1, half - 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


# ---------------------------------------------------------------------------
# Backbone UNet
# ---------------------------------------------------------------------------

class _CondResBlock:
    """Backbone residual block: time bias after conv1, text FiLM after norm2."""

    def __init__(self, c_in, c_out, emb_dim, rng):
        self.norm1 = nn.GroupNorm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, rng=rng)
        self.norm2 = nn.GroupNorm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, rng=rng)
        self.time_bias = nn.Linear(emb_dim, c_out, rng=rng)
        self.film_scale = nn.Linear(emb_dim, c_out, rng=rng, init="zeros")
        self.film_shift = nn.Linear(emb_dim, c_out, rng=rng, init="zeros")
        self.skip = nn.Conv2d(c_in, c_out, 1, rng=rng) if c_in != c_out else None
        self.c_out = c_out

    def __call__(self, x, emb):
        c = self.c_out
        h = self.conv1(nn.silu(self.norm1(x)))
        h = nn.add(h, nn.reshape(self.time_bias(emb), (-1, c, 1, 1)))
        h = self.norm2(h)
        scale = nn.reshape(self.film_scale(emb), (-1, c, 1, 1))
        shift = nn.reshape(self.film_shift(emb), (-1, c, 1, 1))
        h = nn.add(nn.mul(h, nn.add(scale, 1.0)), shift)
        h = self.conv2(nn.silu(h))
        s = self.skip(x) if self.skip is not None else x
        return nn.add(h, s)

    def params(self, prefix):
        out = {}
        for name in ("norm1", "conv1", "norm2", "conv2", "time_bias",
                     "film_scale", "film_shift"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        if self.skip is not None:
            out.update(self.skip.params(f"{prefix}.skip"))
        return out


class UNetBackbone:
    """4-stage encoder / bottleneck / skip decoder over unshuffled latents.

    Encoder stage outputs are the adapter injection sites; their spatial
    scales are asserted against the adapter contract at build time.
    """

    def __init__(self, cfg: PipelineConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        r = cfg.unshuffle
        c0, c1, c2, c3 = cfg.channels
        e = cfg.embed_dim
        self.stem = nn.Conv2d(r * r, c0, 3, padding=1, rng=rng)
        self.time_mlp1 = nn.Linear(TIME_EMB_DIM, e, rng=rng)
        self.time_mlp2 = nn.Linear(e, e, rng=rng)
        self.text_proj = nn.Linear(cfg.text_buckets, e, rng=rng)
        self.enc = [
            _CondResBlock(c0, c0, e, rng),
            _CondResBlock(c1, c1, e, rng),
            _CondResBlock(c2, c2, e, rng),
            _CondResBlock(c3, c3, e, rng),
        ]
        self.downs = [
            nn.Conv2d(c0, c1, 3, stride=2, padding=1, rng=rng),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1, rng=rng),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1, rng=rng),
        ]
        self.mid = _CondResBlock(c3, c3, e, rng)
        self.dec = [
            _CondResBlock(c3 + c2, c2, e, rng),
            _CondResBlock(c2 + c1, c1, e, rng),
            _CondResBlock(c1 + c0, c0, e, rng),
        ]
        self.out_norm = nn.GroupNorm(c0)
        self.out_conv = nn.Conv2d(c0, r * r, 3, padding=1, rng=rng, init="zeros")

    def params(self) -> dict:
        out = self.stem.params("stem")
        out.update(self.time_mlp1.params("time_mlp1"))
        out.update(self.time_mlp2.params("time_mlp2"))
        out.update(self.text_proj.params("text_proj"))
        for i, b in enumerate(self.enc):
            out.update(b.params(f"enc{i}"))
        for i, d in enumerate(self.downs):
            out.update(d.params(f"down{i}"))
        out.update(self.mid.params("mid"))
        for i, b in enumerate(self.dec):
            out.update(b.params(f"dec{i}"))
        out.update(self.out_norm.params("out_norm"))
        out.update(self.out_conv.params("out_conv"))
        return out

    def freeze(self):
        for p in self.params().values():
            p.freeze()

    def is_frozen(self) -> bool:
        return all(p.frozen for p in self.params().values())

    def stage_channels(self) -> list:
        return list(self.cfg.channels)

    def encoder_scales(self, frames: int | None = None) -> list:
        """Spatial dims of the 4 encoder stage outputs for a latent length."""
        h = (frames or self.cfg.frames) // self.cfg.unshuffle
        w = self.cfg.n_mels // self.cfg.unshuffle
        scales = []
        for _ in range(4):
            scales.append((h, w))
            h = (h + 2 - 3) // 2 + 1
            w = (w + 2 - 3) // 2 + 1
        return scales

    def forward(self, z_t, t, text_vec,
                features: MultiScaleFeatures | None = None) -> nn.Tensor:
        """Noise estimate for a batch of latents.

        z_t: [N,1,H,W]; t: int array [N]; text_vec: [N, buckets];
        features: adapter injection maps or None.
        """
        z = z_t if isinstance(z_t, nn.Tensor) else nn.Tensor(np.asarray(z_t))
        if z.data.ndim != 4 or z.shape[1] != 1:
            raise ShapeError(f"latent must be [N,1,H,W], got {z.shape}")
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        temb = nn.Tensor(_time_embedding(t_arr))
        txt = text_vec if isinstance(text_vec, nn.Tensor) else \
            nn.Tensor(np.atleast_2d(np.asarray(text_vec, dtype=np.float32)))
        emb = nn.add(self.time_mlp2(nn.silu(self.time_mlp1(temb))),
                     self.text_proj(txt))

        # injected stage outputs feed both the next encoder stage and the skips
        h = self.stem(nn.pixel_unshuffle(z, self.cfg.unshuffle))
        injected = []
        for i in range(4):
            u = self.enc[i](h, emb)
            if features is not None:
                u = nn.add(u, features.maps[i])
            injected.append(u)
            if i < 3:
                h = self.downs[i](u)

        h = self.mid(injected[3], emb)
        for i, skip_idx in enumerate((2, 1, 0)):
            target = injected[skip_idx].shape[2:]
            h = nn.upsample_to(h, target)
            h = self.dec[i](nn.concat([h, injected[skip_idx]], axis=1), emb)
        h = self.out_conv(nn.silu(self.out_norm(h)))
        return nn.pixel_shuffle(h, self.cfg.unshuffle)

def assert_injection_contract(backbone: UNetBackbone,
                              adapter: ControlAdapter) -> None:
    """Adapter scales and channels must match the encoder stages exactly."""
    if adapter.cfg.channels != backbone.cfg.channels:
        raise ShapeError(
            f"adapter channels {adapter.cfg.channels} != "
            f"backbone channels {backbone.cfg.channels}")
    probe = np.zeros((backbone.cfg.frames, backbone.cfg.n_mels, 1), np.float32)
    with nn.no_grad():
        feats = adapter.forward(probe)
    got = [tuple(m.shape[2:]) for m in feats.maps]
    want = [tuple(s) for s in backbone.encoder_scales()]
    if got != want:
        raise ShapeError(f"adapter scales {got} != encoder scales {want}")


def build_model(cfg: PipelineConfig, condition_types=("melody",),
                seed: int = 0):
    """Backbone plus one adapter per condition type, contract-checked."""
    backbone = UNetBackbone(cfg, seed=seed)
    adapters = {}
    for i, ctype in enumerate(condition_types):
        adapter = ControlAdapter(cfg, ctype, seed=seed + 101 + i)
        assert_injection_contract(backbone, adapter)
        adapters[ctype] = adapter
    return backbone, adapters


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_adapter_step(batch, group: AdapterGroup, backbone: UNetBackbone,
                       sched: DiffusionSchedule, optimizer: nn.Adam,
                       rng: np.random.Generator) -> float:
    """One noise-prediction step; only adapter parameters are updated.

    ``batch`` is (z0 [N,1,H,W], text_vecs [N,buckets], conditions), where
    ``conditions`` holds one [N,T,M,1] tensor per group member.
    """
    if not backbone.is_frozen():
        raise ContractViolation("backbone must be frozen during adapter training")
    z0, text_vecs, conditions = batch
    z0 = np.asarray(z0, dtype=np.float32)
    n = z0.shape[0]
    t = rng.integers(1, sched.timesteps + 1, size=n)
    noise = rng.standard_normal(z0.shape).astype(np.float32)
    z_t = forward_diffuse(z0, t, noise, sched)
    bound = group.with_conditions(list(conditions))
    feats = group_combine(bound)
    eps_hat = backbone.forward(z_t, t, text_vecs, feats)
    loss = nn.mse(eps_hat, nn.Tensor(noise))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def pretrain_step(backbone: UNetBackbone, z0_batch, text_vecs,
                  sched: DiffusionSchedule, optimizer: nn.Adam,
                  rng: np.random.Generator) -> float:
    """Unconditional (text-only) pretraining step for the toy backbone."""
    z0 = np.asarray(z0_batch, dtype=np.float32)
    n = z0.shape[0]
    t = rng.integers(1, sched.timesteps + 1, size=n)
    noise = rng.standard_normal(z0.shape).astype(np.float32)
    z_t = forward_diffuse(z0, t, noise, sched)
    eps_hat = backbone.forward(z_t, t, text_vecs, None)
    loss = nn.mse(eps_hat, nn.Tensor(noise))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def pretrain_backbone(backbone: UNetBackbone, latents: np.ndarray,
                      text_vecs: np.ndarray, sched: DiffusionSchedule,
                      steps: int, lr: float, batch_size: int,
                      seed: int = 0, log_every: int = 0) -> float:
    """Train the backbone on a latent corpus until done; returns final loss.

    The caller freezes afterwards; the returned loss is recorded in the
    checkpoint manifest as the unconditional regression number.
    """
    rng = np.random.default_rng(seed)
    opt = nn.Adam(backbone.params(), lr=lr)
    m = latents.shape[0]
    recent = []
    for step in range(steps):
        idx = rng.integers(0, m, size=min(batch_size, m))
        loss = pretrain_step(backbone, latents[idx], text_vecs[idx],
                             sched, opt, rng)
        recent.append(loss)
        if log_every and (step + 1) % log_every == 0:
            print(f"  pretrain step {step + 1}/{steps} loss {loss:.4f}")
    return float(np.mean(recent[-20:]))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample(text, group: AdapterGroup | None, backbone: UNetBackbone,
           sched: DiffusionSchedule, seed: int,
           frames: int | None = None) -> np.ndarray:
    """Ancestral DDPM sampling; returns the final latent [1,1,H,W].

    Fixed seed fixes every noise draw; a group of zero-initialized adapters
    yields bit-identical output to ``group=None``.
    """
    cfg = backbone.cfg
    h = frames or cfg.frames
    shape = (1, 1, h, cfg.n_mels)
    prompt = text.text() if isinstance(text, TextCondition) else str(text)
    text_vec = embed_text(prompt, cfg.text_buckets)[None, :]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape).astype(np.float32)
    with nn.no_grad():
        feats = group_combine(group) if group is not None else None
        for t in range(sched.timesteps, 0, -1):
            eps_hat = backbone.forward(z, np.array([t]), text_vec, feats).data
            noise = rng.standard_normal(shape).astype(np.float32) if t > 1 else None
            z = ddpm_step(z, eps_hat, t, sched, noise)
    return z


def generate(text, group: AdapterGroup | None, backbone: UNetBackbone,
             sched: DiffusionSchedule, seed: int,
             frames: int | None = None) -> tuple[np.ndarray, AudioClip]:
    """Sample a latent and render it to audio."""
    z = sample(text, group, backbone, sched, seed, frames)
    return z, latent_to_audio(z, backbone.cfg, seed=seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_backbone(ckpt_dir, backbone: UNetBackbone,
                  extra: dict | None = None) -> None:
    meta = {"kind": "backbone", "config": backbone.cfg.to_json()}
    meta.update(extra or {})
    nn.save_checkpoint(ckpt_dir, backbone.params(), meta)


def load_backbone(ckpt_dir, cfg: PipelineConfig | None = None) -> UNetBackbone:
    """Rebuild a frozen backbone from a checkpoint directory."""
    tensors, manifest = nn.load_checkpoint(ckpt_dir)
    if manifest.get("kind") != "backbone":
        raise NotLoaded(f"{ckpt_dir} is not a backbone checkpoint")
    if cfg is None:
        cfg = PipelineConfig.from_json(manifest["config"])
    backbone = UNetBackbone(cfg)
    nn.assign_state(backbone.params(), tensors)
    if all(layer["frozen"] for layer in manifest["layers"].values()):
        backbone.freeze()
    return backbone
