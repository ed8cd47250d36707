"""Configuration dataclasses and the flat ``key=value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    # latent grid and patching
    height: int = 16
    width: int = 8
    channels: int = 4
    patch: int = 2
    # conditioning
    num_classes: int = 4
    cond_len: int = 4
    # latent encoder
    dim: int = 64
    depth_stage1: int = 4
    depth_stage2: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    # diffusion head
    head_width: int = 256
    head_depth: int = 3
    time_freq_dim: int = 256
    head_param: str = "v"               # "v": eps = sqrt(abar) v + sqrt(1-abar) z_t; "eps": direct
    # noise schedule
    max_diffusion_steps: int = 1000
    noise_schedule: str = "cosine"
    sampler_variance: str = "posterior"

    def __post_init__(self) -> None:
        for name in ("height", "width", "channels", "patch", "num_classes", "cond_len",
                     "dim", "heads", "head_width", "head_depth", "time_freq_dim",
                     "max_diffusion_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth_stage1 < 0 or self.depth_stage2 < 0:
            raise ConfigError("encoder depths must be non-negative")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch {self.patch} must divide grid {self.height}x{self.width}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.time_freq_dim % 2:
            raise ConfigError("time_freq_dim must be even")
        if self.noise_schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown noise_schedule {self.noise_schedule!r}")
        if self.head_param not in ("v", "eps"):
            raise ConfigError(f"unknown head_param {self.head_param!r}")
        if self.sampler_variance not in ("posterior", "beta"):
            raise ConfigError(f"unknown sampler_variance {self.sampler_variance!r}")

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch ** 2

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-size layout: 256x16x8 latents, p=4, L=78, D=768, 24 encoder layers."""
        return cls(height=256, width=16, channels=8, patch=4, num_classes=4,
                   cond_len=78, dim=768, depth_stage1=12, depth_stage2=12, heads=12,
                   head_width=1024, head_depth=3)


PHASES = ("unconditional", "conditional")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "conditional"
    q: float = 0.7
    mask_mode: str = "fixed"            # "fixed": floor(qN) masked; "range": floor(qN)..N per batch
    lr: float = 5e-5
    steps: int = 1000
    batch_size: int = 32
    cond_dropout_p: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must be in (0, 1], got {self.q}")
        if self.mask_mode not in ("fixed", "range"):
            raise ConfigError(f"mask_mode must be 'fixed' or 'range', got {self.mask_mode!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ConfigError(f"cond_dropout_p must be in [0, 1], got {self.cond_dropout_p}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class DecodeConfig:
    dec_iters: int = 64
    diff_steps: int = 100
    beta_max: float = 5.0

    def __post_init__(self) -> None:
        if self.dec_iters < 1:
            raise ConfigError("dec_iters must be >= 1")
        if self.diff_steps < 1:
            raise ConfigError("diff_steps must be >= 1")
        if self.beta_max < 1.0:
            raise ConfigError("beta_max must be >= 1")


def to_dict(cfg: Any) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def from_dict(cls: type, data: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def _coerce(value: str, like: Any) -> Any:
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r}: {exc}") from None
    return value


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_kv_text(text)


def format_kv(values: dict[str, Any]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


@dataclass
class RunConfig:
    """Resolved model/train/decode settings: defaults < config file < flags."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    @classmethod
    def resolve(cls, *layers: dict[str, str]) -> "RunConfig":
        sections = {"model": ModelConfig(), "train": TrainConfig(), "decode": DecodeConfig()}
        owner = {}
        for name, cfg in sections.items():
            for f in fields(cfg):
                owner[f.name] = name
        updates: dict[str, dict[str, Any]] = {name: {} for name in sections}
        for layer in layers:
            for key, raw in layer.items():
                key = key.replace("-", "_")
                if key not in owner:
                    raise ConfigError(f"unknown config key {key!r}")
                section = owner[key]
                like = getattr(sections[section], key)
                updates[section][key] = _coerce(str(raw), like)
        return cls(**{name: dataclasses.replace(cfg, **updates[name])
                      for name, cfg in sections.items()})

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for cfg in (self.model, self.train, self.decode):
            out.update(to_dict(cfg))
        return out
