"""Ramp-up weights, the ab-CE threshold schedule and the poly learning-rate policy.

All schedules count training iterations. Ramp lengths are given as a fraction
of the total number of iterations and converted by the caller.
"""
import math
from dataclasses import dataclass


@dataclass
class ScheduleConfig:
    rampup_frac_u: float = 0.1
    rampup_frac_w: float = 0.1
    rampup_frac_abce: float = 0.5
    abce_final: float = 0.9
    power: float = 0.9

    def validate(self, num_classes=None):
        for name in ("rampup_frac_u", "rampup_frac_w", "rampup_frac_abce"):
            frac = getattr(self, name)
            if not 0.0 < frac <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {frac}")
        if num_classes is not None and not 1.0 / num_classes < self.abce_final <= 1.0:
            raise ValueError(f"abce_final must lie in (1/C, 1], got {self.abce_final}")
        if self.power < 0:
            raise ValueError("power must be non-negative")


def ramp_exp(t, T, lam):
    """Exponential ramp ``min(lam, exp(5 (t/T - 1)) * lam)``."""
    if T <= 0:
        raise ValueError("ramp length T must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    if t >= T:
        return float(lam)
    return min(float(lam), math.exp(5.0 * (t / T - 1.0)) * lam)


def ramp_log_threshold(t, T, alpha, num_classes):
    """Threshold for annealed bootstrapped CE, rising quickly from 1/C towards alpha."""
    if T <= 0:
        raise ValueError("ramp length T must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    floor = 1.0 / num_classes
    return min(float(alpha), (1.0 - math.exp(-5.0 * t / T)) * (alpha - floor) + floor)


def poly_lr(it, max_iter, base_lr, power=0.9):
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    if max_iter == 0:
        return float(base_lr)
    return base_lr * (1.0 - it / max_iter) ** power
