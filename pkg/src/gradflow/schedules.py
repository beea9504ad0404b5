"""Temperature (beta) cooling schedules over fine-tuning optimiser steps."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

SCHEDULE_KINDS = ("constant", "linear", "exponential", "inverse_sigmoid")


@dataclass(frozen=True)
class CoolingSchedule:
    kind: str = "inverse_sigmoid"
    beta_max: float = 10.0
    beta_min: float = 0.0
    total_steps: int = 1000
    sharpness: float = 10.0
    midpoint: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.beta_min < 0 or self.beta_max < 0:
            raise ValueError("temperatures must be nonnegative")
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")
        if not 0.0 < self.midpoint < 1.0:
            raise ValueError("midpoint must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_max": self.beta_max,
            "beta_min": self.beta_min,
            "total_steps": self.total_steps,
            "sharpness": self.sharpness,
            "midpoint": self.midpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoolingSchedule":
        return cls(**d)


def beta_at(schedule: CoolingSchedule, step: int) -> float:
    """Temperature after ``step`` optimiser steps, 0 <= step <= total_steps.

    * constant: beta_max throughout
    * linear: straight line from beta_max to beta_min
    * exponential: exp(-k s/S) decay rescaled to hit both endpoints exactly
    * inverse_sigmoid: beta_min + span / (1 + exp(k (s/S - m)))
    """
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    frac = step / s.total_steps
    span = s.beta_max - s.beta_min
    if s.kind == "constant":
        return s.beta_max
    if s.kind == "linear":
        return s.beta_max - span * frac
    if s.kind == "exponential":
        k = s.sharpness
        decay = (math.exp(-k * frac) - math.exp(-k)) / (1.0 - math.exp(-k))
        return s.beta_min + span * decay
    z = s.sharpness * (frac - s.midpoint)
    # 1 / (1 + e^z) written to avoid overflow for large |z|
    if z >= 0:
        ez = math.exp(-z)
        weight = ez / (1.0 + ez)
    else:
        weight = 1.0 / (1.0 + math.exp(z))
    return s.beta_min + span * weight


def sweep_schedules(base: CoolingSchedule, beta_min_list) -> list[CoolingSchedule]:
    """Copies of ``base`` that differ only in beta_min, ascending."""
    values = sorted(float(b) for b in beta_min_list)
    if not values:
        raise ValueError("beta_min list is empty")
    bad = [b for b in values if b > base.beta_max]
    if bad:
        raise ValueError(f"beta_min values {bad} exceed beta_max={base.beta_max}")
    return [replace(base, beta_min=b) for b in values]
