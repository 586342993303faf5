"""Learning-rate, objective-gating and gumbel-temperature schedules.

Everything here is a pure function of ``(step, cfg)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .config import TrainConfig

WARMUP_OBJECTIVES = frozenset({"itm", "pixel", "alignment", "commitment"})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup init_lr -> peak_lr over warmup_iters, then cosine to min_lr.

    Written as convex combinations so the endpoints come out exactly.
    """
    warm, total = cfg.warmup_iters, cfg.total_steps
    if step <= warm:
        t = step / warm
        return cfg.init_lr * (1.0 - t) + cfg.peak_lr * t
    if total <= warm:
        return cfg.min_lr
    progress = min(1.0, (step - warm) / (total - warm))
    w = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.min_lr * (1.0 - w) + cfg.peak_lr * w


def objective_gate(step: int, cfg: TrainConfig) -> frozenset:
    """Objectives active at ``step``: MIM and MLM join once the codebook warmup ends (inclusive)."""
    allowed = cfg.objective_set
    if step < cfg.warmup_iters:
        allowed = allowed & WARMUP_OBJECTIVES
    if cfg.info_nce:
        allowed = allowed | {"contrastive"}
    return frozenset(allowed)


def gumbel_temperature(step: int, cfg: TrainConfig) -> float:
    """Exponential anneal from gumbel_tau_start to gumbel_tau_end over total_steps."""
    progress = min(1.0, max(0, step) / cfg.total_steps)
    return cfg.gumbel_tau_start * (cfg.gumbel_tau_end / cfg.gumbel_tau_start) ** progress


@dataclass(frozen=True)
class ScheduleState:
    global_step: int
    current_lr: float
    active_objectives: frozenset
    gumbel_temperature: float


def schedule_at(step: int, cfg: TrainConfig) -> ScheduleState:
    return ScheduleState(step, lr_at(step, cfg), objective_gate(step, cfg), gumbel_temperature(step, cfg))
