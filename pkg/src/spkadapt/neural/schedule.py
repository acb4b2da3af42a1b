"""Learning-rate schedules: Noam warmup/decay and validation-driven annealing."""

import math
from dataclasses import dataclass

from .._validation import ValidationError


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "noam"
    warmup_steps: int = 25000
    peak_lr: float = 1e-3
    anneal_factor: float = 0.5
    improvement_threshold: float = 0.0025

    def __post_init__(self):
        if self.kind not in ("noam", "validation_anneal", "constant"):
            raise ValidationError(f"unknown schedule {self.kind!r}")
        if self.warmup_steps < 1:
            raise ValidationError("warmup_steps must be >= 1")
        if not 0.0 < self.anneal_factor < 1.0:
            raise ValidationError("anneal_factor must lie in (0, 1)")


def anneal_count(history, threshold):
    """Number of epochs whose relative improvement over the previous one fell short."""
    count = 0
    for prev, cur in zip(history, history[1:]):
        gain = (prev - cur) / prev if prev > 0 else prev - cur
        if gain < threshold:
            count += 1
    return count


def lr_factor(schedule, step, validation_history=()):
    """Multiplier in (0, 1] applied to each optimizer group's base rate."""
    if step < 1:
        raise ValidationError(f"step must be >= 1, got {step}")
    if schedule.kind == "noam":
        w = schedule.warmup_steps
        return min(step / w, math.sqrt(w / step))
    if schedule.kind == "validation_anneal":
        return schedule.anneal_factor ** anneal_count(list(validation_history), schedule.improvement_threshold)
    return 1.0


def lr_at(schedule, step, validation_history=()):
    return schedule.peak_lr * lr_factor(schedule, step, validation_history)
