"""
Curriculum over adaptation steps.

Progress follows a half cosine, alpha(t) = (1 - cos(pi * min(t / t_c, 1))) / 2.
The window shrinks linearly in alpha from w_start to w_target and is rounded
half up; the soft-mask penalty tau grows log-linearly in alpha from tau_start
to tau_end. From t_c on, training switches to the hard -inf mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from hwattn.engine.masking import AdditiveMask, WindowSpec, curriculum_mask, hybrid_mask
from hwattn.engine.model import SequenceLayout
from hwattn.run.exceptions import ConfigError


def alpha(t: int, t_c: int) -> float:
    """
    This function returns cosine curriculum progress in [0, 1]

    Args:
        t (int): optimizer step, >= 0
        t_c (int): curriculum length in steps

    Raises:
        ConfigError: t_c < 1
        ValueError: t < 0

    Returns:
        float: alpha(t), clamped at 1 for t >= t_c
    """
    if t_c < 1:
        raise ConfigError("t_c", f"must be >= 1, got {t_c}")
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    return 0.5 * (1.0 - math.cos(math.pi * min(t / t_c, 1.0)))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CurriculumSchedule:
    """
    Window/temperature curriculum. With direct=True the target window and the
    hard mask apply from step 0.
    """

    w_start: int = 128
    w_target: int = 32
    tau_start: float = 1.0
    tau_end: float = 1.0e4
    t_c: int = 1200
    direct: bool = False

    def validate(self) -> CurriculumSchedule:
        if self.w_target < 1:
            raise ConfigError("w_target", f"must be >= 1, got {self.w_target}")
        if self.w_start < self.w_target:
            raise ConfigError("w_start", f"{self.w_start} is below w_target={self.w_target}")
        if self.t_c < 1:
            raise ConfigError("t_c", f"must be >= 1, got {self.t_c}")
        if not self.tau_start > 0:
            raise ConfigError("tau_start", f"must be > 0, got {self.tau_start}")
        if not self.tau_end > self.tau_start:
            raise ConfigError("tau_end", f"must exceed tau_start={self.tau_start}, got {self.tau_end}")
        return self

    @classmethod
    def for_steps(cls, total_steps: int, fraction: float = 0.6, **kwargs) -> CurriculumSchedule:
        """Schedule whose curriculum covers `fraction` of total_steps."""
        return cls(t_c=max(1, round_half_up(fraction * total_steps)), **kwargs).validate()

    def alpha(self, t: int) -> float:
        return 1.0 if self.direct else alpha(t, self.t_c)

    def is_hard(self, t: int) -> bool:
        return self.direct or t >= self.t_c

    def mask_for_step(self, layout: SequenceLayout, t: int) -> AdditiveMask:
        """
        This method returns the student's training mask at step t

        Args:
            layout (SequenceLayout): training sequence layout
            t (int): optimizer step

        Returns:
            AdditiveMask: soft curriculum mask before t_c, hard hybrid mask at w_target from t_c on
        """
        if self.is_hard(t):
            return hybrid_mask(layout, WindowSpec.bounded(self.w_target))
        return curriculum_mask(layout, window_at(t, self), tau_at(t, self))


def window_at(t: int, sched: CurriculumSchedule) -> int:
    a = sched.alpha(t)
    return round_half_up(sched.w_start - a * (sched.w_start - sched.w_target))


def tau_at(t: int, sched: CurriculumSchedule) -> float:
    """
    This function interpolates the mask penalty on a log scale

    Args:
        t (int): optimizer step
        sched (CurriculumSchedule): schedule

    Raises:
        ConfigError: non-positive tau bounds

    Returns:
        float: tau(t); exactly tau_start at alpha 0 and tau_end at alpha 1
    """
    if not (sched.tau_start > 0 and sched.tau_end > 0):
        raise ConfigError("tau_start", f"tau bounds must be > 0, got {sched.tau_start}, {sched.tau_end}")
    a = sched.alpha(t)
    if a == 0.0:
        return float(sched.tau_start)
    if a == 1.0:
        return float(sched.tau_end)
    log_start, log_end = math.log(sched.tau_start), math.log(sched.tau_end)
    return math.exp(log_start + a * (log_end - log_start))
