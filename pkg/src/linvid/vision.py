"""Toy vision transformer with per-layer sorted token merging.

Frames are cut into square patches, linearly embedded, given learned
positional embeddings and a CLS token. Each retained layer runs
attention, then merges/sorts patch tokens, then the MLP. The last layer of
the nominal depth is dropped, and a two-layer MLP projects every surviving
token into the language model width.

Weights are random (seeded); nothing here is pretrained.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .merge import FrameTokenSet, MergedToken, normalize_order, plan_layer, plan_schedule

MERGE_POLICIES = ("always", "multi-frame-only")


class ConfigError(ValueError):
    """Configuration fails validation."""


@dataclass
class EncoderConfig:
    image_side: int = 64
    patch_size: int = 8
    d_vis: int = 64
    n_layers: int = 5
    n_heads: int = 4
    d_llm: int = 64
    keep_ratio: float = 0.25
    sort_order: str = "ascending"
    merge_policy: str = "always"
    mlp_ratio: int = 2

    def __post_init__(self):
        self.validate()

    @property
    def n_used(self):
        return self.n_layers - 1

    @property
    def grid(self):
        return self.image_side // self.patch_size

    @property
    def n_patches(self):
        return self.grid**2

    def validate(self):
        if self.patch_size < 1 or self.image_side < 1 or self.image_side % self.patch_size:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if self.n_layers < 2:
            raise ConfigError("n_layers must be >= 2 (the last layer is dropped)")
        if self.d_vis % self.n_heads:
            raise ConfigError(f"d_vis {self.d_vis} not divisible by n_heads {self.n_heads}")
        if not (0 < self.keep_ratio <= 1):
            raise ConfigError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        try:
            self.sort_order = normalize_order(self.sort_order)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.merge_policy not in MERGE_POLICIES:
            raise ConfigError(f"merge_policy must be one of {MERGE_POLICIES}")

    def schedule(self):
        return plan_schedule(self.n_patches, self.n_used, self.keep_ratio)

    def tokens_per_frame(self, merged=True):
        if not merged:
            return self.n_patches + 1
        return self.schedule().kept + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "toy": dict(image_side=64, patch_size=8, d_vis=64, n_layers=5, n_heads=4, d_llm=64, keep_ratio=0.25),
    # 384-pixel / patch-16 geometry with 24 nominal layers (23 used); narrow width
    # because the preset exists for token accounting.
    "siglip384": dict(image_side=384, patch_size=16, d_vis=32, n_layers=24, n_heads=2, d_llm=64, keep_ratio=0.1),
    "needle": dict(image_side=32, patch_size=8, d_vis=32, n_layers=6, n_heads=2, d_llm=64, keep_ratio=0.1),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return EncoderConfig(**{**PRESETS[name], **overrides})


@dataclass
class Frame:
    pixels: np.ndarray  # (side, side, 3) uint8
    timestamp_index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ConfigError(f"frame pixels must be (H, W, 3) uint8, got {self.pixels.shape} {self.pixels.dtype}")


@dataclass
class FrameEmbedding:
    tokens: FrameTokenSet
    frame_index: int
    trace: list = field(default_factory=list)

    def array(self):
        return self.tokens.embeddings()

    def __len__(self):
        return len(self.tokens)


def _normal(shape, std, g, dtype):
    return nn.Parameter(torch.randn(shape, generator=g, dtype=dtype) * std)


class _Linear(nn.Module):
    def __init__(self, d_in, d_out, g, dtype, std=None):
        super().__init__()
        self.weight = _normal((d_in, d_out), std if std is not None else d_in**-0.5, g, dtype)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return x @ self.weight + self.bias


class ViTLayer(nn.Module):
    def __init__(self, d, n_heads, mlp_ratio, g, dtype):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=dtype)
        self.qkv = _Linear(d, 3 * d, g, dtype)
        self.proj = _Linear(d, d, g, dtype)
        self.ln2 = nn.LayerNorm(d, dtype=dtype)
        self.fc1 = _Linear(d, mlp_ratio * d, g, dtype)
        self.fc2 = _Linear(mlp_ratio * d, d, g, dtype)

    def attend(self, x):
        B, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.reshape(B, n, h, d // h).transpose(1, 2) for t in (q, k, v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, n, d)
        return x + self.proj(y)

    def mlp(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class VisionEncoder(nn.Module):
    """Patch embedding, ``n_used`` ViT layers and the two-layer connector."""

    def __init__(self, config: EncoderConfig, seed=0, dtype=torch.float32):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        c = config
        self.patch_embed = _Linear(3 * c.patch_size**2, c.d_vis, g, dtype)
        self.cls = _normal((c.d_vis,), 0.02, g, dtype)
        self.pos = _normal((c.n_patches + 1, c.d_vis), 0.5, g, dtype)
        self.layers = nn.ModuleList(ViTLayer(c.d_vis, c.n_heads, c.mlp_ratio, g, dtype) for _ in range(c.n_used))
        self.conn1 = _Linear(c.d_vis, c.d_llm, g, dtype)
        self.conn2 = _Linear(c.d_llm, c.d_llm, g, dtype)

    @property
    def dtype(self):
        return self.pos.dtype

    def embed(self, pixels):
        """``(F, side, side, 3)`` uint8 -> ``(F, n_patches + 1, d_vis)``."""
        c = self.config
        x = torch.as_tensor(np.asarray(pixels)).to(self.dtype) / 255.0 - 0.5
        Fn = x.shape[0]
        if tuple(x.shape[1:]) != (c.image_side, c.image_side, 3):
            raise ConfigError(f"frame shape {tuple(x.shape[1:])} does not match {c.image_side}x{c.image_side}x3")
        p, gsz = c.patch_size, c.grid
        patches = x.reshape(Fn, gsz, p, gsz, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(Fn, gsz * gsz, 3 * p * p)
        tok = self.patch_embed(patches)
        cls = self.cls.expand(Fn, 1, -1)
        return torch.cat([cls, tok], dim=1) + self.pos

    def connector(self, x):
        return self.conn2(F.gelu(self.conn1(x)))

    def forward(self, pixels, removals=None, order="ascending", rng=None, trace=False):
        """Encode a batch of frames.

        ``removals`` is the per-layer merge count list, or ``None`` to skip
        merging. Returns ``(tokens, sizes, origins, traces)`` where ``tokens``
        is ``(F, kept + 1, d_llm)`` with CLS first.
        """
        x = self.embed(pixels)
        Fn, n1, _ = x.shape
        n = n1 - 1
        sizes = np.ones((Fn, n), dtype=np.int64)
        origins = np.tile(np.arange(n, dtype=np.int64), (Fn, 1))
        traces = [[] for _ in range(Fn)]
        if removals is not None and len(removals) != len(self.layers):
            raise ConfigError(f"{len(removals)} merge counts for {len(self.layers)} layers")
        for li, layer in enumerate(self.layers):
            x = layer.attend(x)
            if removals is not None:
                r = removals[li]
                cls, pt = x[:, :1], x[:, 1:]
                plan = plan_layer(pt.detach().cpu().numpy(), sizes, origins, r, order, rng, keep_pairs=trace)
                pt = torch.from_numpy(plan.weights).to(x.dtype) @ pt
                x = torch.cat([cls, pt], dim=1)
                sizes, origins = plan.sizes, plan.origins
                if trace:
                    for f in range(Fn):
                        traces[f].append(
                            {
                                "layer": li,
                                "r": int(r),
                                "pairs": [list(map(int, pr)) for pr in plan.pairs[f]] if plan.pairs else [],
                                "sizes": plan.sizes[f].tolist(),
                                "origins": plan.origins[f].tolist(),
                            }
                        )
            x = layer.mlp(x)
        return self.connector(x), sizes, origins, traces


def merge_applies(config: EncoderConfig, n_frames):
    return config.merge_policy == "always" or n_frames > 1


def patchify(frame: Frame, config: EncoderConfig, encoder: VisionEncoder):
    """Embedded CLS + patch tokens of one frame, all of size 1."""
    with torch.no_grad():
        x = encoder.embed(frame.pixels[None])[0].cpu().numpy()
    return FrameTokenSet.from_embeddings(x)


def _frame_rng(seed, frame_index):
    return np.random.default_rng([seed, frame_index])


def encode_frame(frame: Frame, config: EncoderConfig, encoder: VisionEncoder, merge=True, seed=0, trace=False):
    """Encode one frame; ``merge=False`` bypasses token merging entirely."""
    removals = config.schedule().removals if merge else None
    rng = _frame_rng(seed, frame.timestamp_index)
    with torch.no_grad():
        toks, sizes, origins, traces = encoder(frame.pixels[None], removals, config.sort_order, rng, trace)
    toks = toks[0].cpu().numpy()
    cls = MergedToken(toks[0], 1, 0)
    patches = [MergedToken(e, int(s), int(o)) for e, s, o in zip(toks[1:], sizes[0], origins[0])]
    return FrameEmbedding(FrameTokenSet(cls, patches, config.n_patches), frame.timestamp_index, traces[0])


def encode_video(frames, config: EncoderConfig, encoder: VisionEncoder, seed=0, trace=False):
    """Per-frame encoding; frames never see each other."""
    frames = list(frames)
    if not frames:
        raise ConfigError("no frames")
    shapes = {f.pixels.shape for f in frames}
    if len(shapes) > 1:
        raise ConfigError(f"mixed frame geometries: {sorted(shapes)}")
    merge = merge_applies(config, len(frames))
    return [encode_frame(f, config, encoder, merge=merge, seed=seed, trace=trace) for f in frames]
