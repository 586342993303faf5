"""Training configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
Booleans accept true/false/1/0/yes/no; ``objectives`` is a comma list.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..objectives import COMPONENTS

ALL_OBJECTIVES = ",".join(COMPONENTS)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # data
    data_dir: str = ""
    n_train: int = 500
    n_heldout: int = 100
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    text_max_len: int = 16
    # model
    dim: int = 64
    heads: int = 4
    vision_layers: int = 4
    text_layers: int = 4
    fusion_layers: int = 4
    mlp_ratio: int = 4
    sim_dim: int = 32
    codebook_size: int = 64
    code_dim: int = 64
    code_projection: bool = True  # linear maps into and out of code space
    code_detach: bool = True  # quantizer losses stop at the code projection
    code_norm: bool = True  # L2-normalise code vectors
    dtype: str = "float32"
    # codebook
    beta: float = 0.25
    quantize_mode: str = "gumbel"
    gumbel_tau_start: float = 1.0
    gumbel_tau_end: float = 0.0625
    dead_code_refresh: bool = True
    dead_code_threshold: int = 1
    dead_code_noise: float = 0.01
    # optimization
    batch_size: int = 32
    total_steps: int = 3000
    warmup_iters: int = 1000
    init_lr: float = 1e-5
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    # objectives
    text_mask_ratio: float = 0.15
    visual_mask_ratio: float = 0.75
    objectives: str = ALL_OBJECTIVES
    weight_itm: float = 1.0
    weight_mlm: float = 1.0
    weight_mim: float = 1.0
    weight_pixel: float = 1.0
    weight_alignment: float = 1.0
    weight_commitment: float = 1.0
    pixel_loss_full: bool = False
    info_nce: bool = False
    weight_contrastive: float = 1.0
    # io
    out_dir: str = "runs/default"
    ckpt_every: int = 1000
    eval_batch: int = 2048

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.warmup_iters < 1:
            raise ConfigError("warmup_iters must be >= 1")
        if self.total_steps < self.warmup_iters:
            raise ConfigError("total_steps must be >= warmup_iters")
        for name in ("text_mask_ratio", "visual_mask_ratio"):
            r = getattr(self, name)
            if not 0 < r < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {r}")
        if not self.init_lr <= self.peak_lr:
            raise ConfigError("init_lr must be <= peak_lr")
        if min(self.init_lr, self.peak_lr, self.min_lr) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.quantize_mode not in ("hard", "gumbel"):
            raise ConfigError(f"quantize_mode must be hard or gumbel, got {self.quantize_mode!r}")
        if not (self.gumbel_tau_start > 0 and self.gumbel_tau_end > 0):
            raise ConfigError("gumbel temperatures must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.codebook_size < 2 or self.code_dim < 1:
            raise ConfigError("codebook needs codebook_size >= 2 and code_dim >= 1")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.n_train < 2 or self.n_heldout < 2:
            raise ConfigError("n_train and n_heldout must be >= 2")
        unknown = set(self.objective_set) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"unknown objectives: {', '.join(sorted(unknown))}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")

    @property
    def objective_set(self) -> frozenset:
        return frozenset(o.strip() for o in self.objectives.split(",") if o.strip())

    @property
    def loss_weights(self) -> dict[str, float]:
        names = COMPONENTS + ("contrastive",)
        return {n: getattr(self, f"weight_{n}") for n in names}

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def effective_batch(self) -> int:
        return min(self.batch_size, self.n_train)

    @property
    def steps_per_epoch(self) -> int:
        """Batches per pass over the training split; a ragged tail is dropped."""
        return max(1, self.n_train // self.batch_size)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


def _coerce(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> TrainConfig:
    by_name = {f.name: f for f in fields(TrainConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(by_name[key], raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(format_config(cfg))
