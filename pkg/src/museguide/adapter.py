"""Control adapters: side networks that turn a condition tensor into
multi-scale features summed into the frozen denoiser's encoder stages.

Each adapter is four residual feature blocks alternating with three stride-2
downsamplers.  Every block feeds a zero-initialized 1x1 projection ("tap"),
so an untrained adapter injects exact zeros and generation is untouched.
Adapters can be combined into weighted groups; the weighted feature sum is
what actually reaches the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .config import PipelineConfig
from .errors import ShapeError
from .latent import mel_to_latent

CONDITION_TYPES = ("chord", "melody", "melody_instr")
SECTION_TYPES = ("intro", "chorus", "outro", "generic")


@dataclass(frozen=True)
class MultiScaleFeatures:
    """One feature map per encoder stage, ordered fine to coarse."""

    maps: tuple

    def __post_init__(self):
        maps = tuple(self.maps)
        if len(maps) != 4:
            raise ShapeError(f"expected 4 feature maps, got {len(maps)}")
        object.__setattr__(self, "maps", maps)

    def spatial_shapes(self) -> list:
        return [m.shape[2:] for m in self.maps]

    def data(self) -> list:
        return [m.data if isinstance(m, nn.Tensor) else m for m in self.maps]


class _ResBlock:
    """conv3x3 -> SiLU -> conv3x3 plus skip (1x1 conv when channels change)."""

    def __init__(self, c_in, c_out, rng):
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, rng=rng)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, rng=rng)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def __call__(self, x):
        h = self.conv2(nn.silu(self.conv1(x)))
        s = self.skip(x) if self.skip is not None else x
        return nn.add(h, s)

    def params(self, prefix):
        out = {}
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        if self.skip is not None:
            out.update(self.skip.params(f"{prefix}.skip"))
        return out


class ControlAdapter:
    """Multi-scale feature extractor for one control condition type."""

    def __init__(self, cfg: PipelineConfig, condition_type: str = "melody",
                 section: str = "generic", seed: int = 0):
        if condition_type not in CONDITION_TYPES:
            raise ShapeError(f"unknown condition type {condition_type!r}")
        if section not in SECTION_TYPES:
            raise ShapeError(f"unknown section type {section!r}")
        self.cfg = cfg
        self.condition_type = condition_type
        self.section = section
        rng = np.random.default_rng(seed)
        r = cfg.unshuffle
        ch = cfg.channels
        self.conv_in = nn.Conv2d(r * r, ch[0], 3, padding=1, rng=rng)
        self.blocks = [
            _ResBlock(ch[0], ch[0], rng),
            _ResBlock(ch[0], ch[1], rng),
            _ResBlock(ch[1], ch[2], rng),
            _ResBlock(ch[2], ch[3], rng),
        ]
        self.downs = [
            nn.Conv2d(ch[0], ch[0], 3, stride=2, padding=1, rng=rng),
            nn.Conv2d(ch[1], ch[1], 3, stride=2, padding=1, rng=rng),
            nn.Conv2d(ch[2], ch[2], 3, stride=2, padding=1, rng=rng),
        ]
        # zero-init final projections: an untrained adapter is a no-op
        self.taps = [nn.Conv2d(c, c, 1, rng=rng, init="zeros") for c in ch]

    def params(self) -> dict:
        out = self.conv_in.params("conv_in")
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        for i, d in enumerate(self.downs):
            out.update(d.params(f"down{i}"))
        for i, t in enumerate(self.taps):
            out.update(t.params(f"tap{i}"))
        return out

    def _prepare(self, condition: np.ndarray) -> nn.Tensor:
        cond = np.asarray(condition, dtype=np.float32)
        if cond.ndim == 3:
            cond = cond[None]
        if cond.ndim != 4 or cond.shape[3] != 1 or cond.shape[2] != self.cfg.n_mels:
            raise ShapeError(
                f"condition must be [T, {self.cfg.n_mels}, 1] "
                f"(optionally batched), got {condition.shape}")
        if cond.shape[1] % self.cfg.unshuffle:
            raise ShapeError(
                f"condition length {cond.shape[1]} not divisible by "
                f"unshuffle={self.cfg.unshuffle}")
        # raw mel power -> the same normalized plane the denoiser sees
        z = mel_to_latent(cond[:, :, :, 0], self.cfg)
        return nn.Tensor(z)

    def forward(self, condition) -> MultiScaleFeatures:
        """Condition tensor [T, n_mels, 1] (or batched) -> 4 feature maps."""
        x = condition if isinstance(condition, nn.Tensor) else self._prepare(condition)
        h = self.conv_in(nn.pixel_unshuffle(x, self.cfg.unshuffle))
        maps = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            maps.append(self.taps[i](h))
            if i < 3:
                h = self.downs[i](h)
        return MultiScaleFeatures(tuple(maps))


def adapter_forward(adapter: ControlAdapter, condition) -> MultiScaleFeatures:
    return adapter.forward(condition)


@dataclass(frozen=True)
class GroupMember:
    adapter: ControlAdapter
    condition: np.ndarray | None
    weight: float = 1.0


@dataclass(frozen=True)
class AdapterGroup:
    """Weighted set of adapters; features combine as sum_i w_i * Y_i."""

    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ShapeError("adapter group needs at least one member")
        if any(not np.isfinite(m.weight) for m in members):
            raise ShapeError("group weights must be finite")
        object.__setattr__(self, "members", members)

    def with_conditions(self, conditions: list) -> "AdapterGroup":
        if len(conditions) != len(self.members):
            raise ShapeError("one condition per group member required")
        return AdapterGroup(tuple(
            replace(m, condition=c) for m, c in zip(self.members, conditions)))

    def params(self) -> dict:
        out = {}
        for i, m in enumerate(self.members):
            for k, p in m.adapter.params().items():
                out[f"member{i}.{k}"] = p
        return out


def group_combine(group: AdapterGroup) -> MultiScaleFeatures:
    """Weighted elementwise sum of every member's multi-scale features."""
    combined = None
    for m in group.members:
        feats = m.adapter.forward(m.condition)
        scaled = [nn.mul(f, float(m.weight)) for f in feats.maps]
        if combined is None:
            combined = scaled
        else:
            if [s.shape for s in scaled] != [c.shape for c in combined]:
                raise ShapeError("group members produced mismatched shapes")
            combined = [nn.add(c, s) for c, s in zip(combined, scaled)]
    return MultiScaleFeatures(tuple(combined))


def inject(encoder_maps: MultiScaleFeatures,
           features: MultiScaleFeatures) -> MultiScaleFeatures:
    """Elementwise U_j + y_j at every scale."""
    out = []
    for u, y in zip(encoder_maps.maps, features.maps):
        if u.shape != y.shape:
            raise ShapeError(f"injection shape mismatch: {u.shape} vs {y.shape}")
        out.append(nn.add(u, y))
    return MultiScaleFeatures(tuple(out))


def save_adapter(ckpt_dir, adapter: ControlAdapter, extra: dict | None = None):
    meta = {
        "kind": "adapter",
        "condition_type": adapter.condition_type,
        "section": adapter.section,
        "config": adapter.cfg.to_json(),
    }
    meta.update(extra or {})
    nn.save_checkpoint(ckpt_dir, adapter.params(), meta)


def load_adapter(ckpt_dir, cfg: PipelineConfig) -> ControlAdapter:
    tensors, manifest = nn.load_checkpoint(ckpt_dir)
    adapter = ControlAdapter(cfg, manifest.get("condition_type", "melody"),
                             manifest.get("section", "generic"))
    nn.assign_state(adapter.params(), tensors)
    return adapter
