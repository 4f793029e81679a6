"""Run configuration shared by every CLI subcommand.

JSON layout (all sections and fields optional)::

    {
      "seed": 0,
      "precision": "double",            # "single" | "double"
      "encoder": {"preset": "toy", ...EncoderConfig fields as overrides},
      "language": {"d_model": 64, "n_layers": 2, "data_dependent": true},
      "memory": {"d_model": 1024, "n_layers": 24, "bytes_per_scalar": 2,
                 "variant": "rwkv4-state", "n_heads": 1,
                 "token_preset": "siglip384"},
      "bench": {"frame_counts": [64, 256, 1024, 4096], "frame_batch": 64,
                "baseline_byte_budget": 67108864,
                "prefix_lengths": [1024, 4096, 16384, 32768],
                "baseline_max_prefix": 16384, "latency_d_model": 256,
                "latency_layers": 2, "samples": 200, "warmup": 20,
                "min_sample_seconds": 1e-6, "step_batch": 1},
      "needle": {...NeedleTask fields},
      "train": {...TrainConfig fields},
      "ablate": {"ratios": [0.1, 0.2, ..., 1.0],
                 "orders": ["ascending", "descending", "random"],
                 "task_preset": "needle"}
    }

``memory`` describes the matched dimensions for the analytic comparison;
``token_preset`` names the encoder geometry whose merged token count is used
for it. ``ablate.task_preset`` is the geometry the needle task trains at.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .baseline import VARIANTS, MemoryModel
from .needle import NeedleTask, TrainConfig
from .vision import PRESETS, ConfigError, EncoderConfig, preset

PRECISIONS = ("single", "double")


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{name}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


@dataclass
class LanguageConfig:
    d_model: int = 64
    n_layers: int = 2
    data_dependent: bool = True

    def __post_init__(self):
        if self.d_model < 1 or self.n_layers < 1:
            raise ConfigError("language dims must be positive")


@dataclass
class MemoryConfig:
    d_model: int = 1024
    n_layers: int = 24
    bytes_per_scalar: int = 2
    variant: str = "rwkv4-state"
    n_heads: int = 1
    token_preset: str = "siglip384"

    def __post_init__(self):
        if self.variant not in VARIANTS or self.variant == "kv-cache":
            raise ConfigError(f"memory.variant must be a recurrent variant from {VARIANTS[1:]}")
        if self.token_preset not in PRESETS:
            raise ConfigError(f"memory.token_preset: unknown preset {self.token_preset!r}")
        self.models()

    def models(self):
        try:
            kv = MemoryModel(self.d_model, self.n_layers, self.bytes_per_scalar, "kv-cache", self.n_heads)
            st = MemoryModel(self.d_model, self.n_layers, self.bytes_per_scalar, self.variant, self.n_heads)
        except ValueError as e:
            raise ConfigError(f"memory: {e}") from None
        return kv, st

    def tokens_per_frame(self):
        return preset(self.token_preset).tokens_per_frame()


def _ascending(xs, name):
    if not xs or any(int(x) < 1 for x in xs) or list(xs) != sorted(set(xs)):
        raise ConfigError(f"{name} must be strictly ascending positive integers")


@dataclass
class BenchConfig:
    frame_counts: list = field(default_factory=lambda: [64, 256, 1024, 4096])
    frame_batch: int = 64
    baseline_byte_budget: int = 64 * 2**20
    prefix_lengths: list = field(default_factory=lambda: [1024, 4096, 16384, 32768])
    baseline_max_prefix: int = 16384
    latency_d_model: int = 256
    latency_layers: int = 2
    samples: int = 200
    warmup: int = 20
    min_sample_seconds: float = 1e-6
    step_batch: int = 1

    def __post_init__(self):
        _ascending(self.frame_counts, "bench.frame_counts")
        _ascending(self.prefix_lengths, "bench.prefix_lengths")
        if self.samples < 100:
            raise ConfigError("bench.samples must be >= 100")
        sizes = (self.frame_batch, self.latency_d_model, self.latency_layers, self.step_batch)
        if self.warmup < 0 or min(sizes) < 1:
            raise ConfigError("bench sizes must be positive")


@dataclass
class AblateConfig:
    ratios: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    orders: list = field(default_factory=lambda: ["ascending", "descending", "random"])
    task_preset: str = "needle"

    def __post_init__(self):
        if not self.ratios or any(not (0 < r <= 1) for r in self.ratios):
            raise ConfigError("ablate.ratios must lie in (0, 1]")
        if self.task_preset not in PRESETS:
            raise ConfigError(f"ablate.task_preset: unknown preset {self.task_preset!r}")
        for o in self.orders:
            EncoderConfig(sort_order=o)


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "double"
    encoder: EncoderConfig = field(default_factory=lambda: preset("toy"))
    encoder_preset: str = "toy"
    language: LanguageConfig = field(default_factory=LanguageConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    needle: NeedleTask = field(default_factory=NeedleTask)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.encoder.validate()
        return self

    def to_dict(self):
        d = {
            "seed": int(self.seed),
            "precision": self.precision,
            "encoder": {"preset": self.encoder_preset, **self.encoder.to_dict()},
        }
        for name in ("language", "memory", "bench", "needle", "train", "ablate"):
            d[name] = asdict(getattr(self, name))
        return d

    def with_overrides(self, **kw):
        """Copy with encoder fields (``keep_ratio``, ``sort_order``, ``merge_policy``) replaced."""
        out = copy.deepcopy(self)
        enc = {k: v for k, v in kw.items() if v is not None}
        if enc:
            out.encoder = EncoderConfig(**{**out.encoder.to_dict(), **enc})
        return out.validate()


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {"seed", "precision", "encoder", "language", "memory", "bench", "needle", "train", "ablate"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    enc = dict(data.get("encoder") or {})
    name = enc.pop("preset", "toy")
    try:
        encoder = preset(name, **enc)
    except TypeError as e:
        raise ConfigError(f"encoder: {e}") from None
    cfg = RunConfig(
        seed=data.get("seed", 0),
        precision=data.get("precision", "double"),
        encoder=encoder,
        encoder_preset=name,
        language=_section(LanguageConfig, data.get("language"), "language"),
        memory=_section(MemoryConfig, data.get("memory"), "memory"),
        bench=_section(BenchConfig, data.get("bench"), "bench"),
        needle=_section(NeedleTask, data.get("needle"), "needle"),
        train=_section(TrainConfig, data.get("train"), "train"),
        ablate=_section(AblateConfig, data.get("ablate"), "ablate"),
    )
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    return cfg.validate()


def load_config(path=None):
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from None
    return config_from_dict(data)
