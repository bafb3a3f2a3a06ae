"""Step-size schedules and the adaptive consensus factor."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidArgumentError

LR_KINDS = ("constant", "cosine_warmup", "inv_sqrt_warmup")


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    peak: float
    warmup: int = 0  # iterations
    total: int = 1  # iterations
    alpha_min: float = 0.0

    def __post_init__(self):
        if self.kind not in LR_KINDS:
            raise InvalidArgumentError(f"unknown lr kind {self.kind!r}")
        if not self.peak > 0:
            raise InvalidArgumentError("lr peak must be positive")
        if self.warmup < 0 or self.total < 0:
            raise InvalidArgumentError("warmup and total spans must be non-negative")
        if not 0 <= self.alpha_min <= self.peak:
            raise InvalidArgumentError("alpha_min must lie in [0, peak]")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Step size at 0-based iteration ``t``.

    The warm-up ramp is ``peak * (t + 1) / (warmup + 1)`` so that the first
    step is already positive and the ramp lands on ``peak`` at ``t == warmup``,
    where the decay phase starts.
    """
    if not 0 <= t < schedule.total:
        raise InvalidArgumentError(f"iteration {t} outside schedule span [0, {schedule.total})")
    peak, w = schedule.peak, schedule.warmup
    if schedule.kind == "constant":
        return peak
    if t < w:
        return peak * (t + 1) / (w + 1)
    if schedule.kind == "cosine_warmup":
        span = schedule.total - w
        frac = (t - w) / span
        return schedule.alpha_min + (peak - schedule.alpha_min) * 0.5 * (1.0 + math.cos(math.pi * frac))
    # inverse square root decay after the ramp
    return peak * math.sqrt(max(w, 1) / max(t, 1))


@dataclass(frozen=True)
class ConsensusConfig:
    """Adaptive consensus settings.

    With ``g0 is None`` the factor is ``(alpha / alpha_max_ref) ** p`` where the
    reference is frozen by the caller at the first iteration of ``e_start``.
    With an explicit ``g0`` the factor is ``g0 * alpha ** p``.
    """

    p: float = 0.0
    e_start: int = 0
    g0: float | None = None

    def __post_init__(self):
        if not self.p >= 0:
            raise InvalidArgumentError("consensus exponent p must be >= 0")
        if self.e_start < 0:
            raise InvalidArgumentError("e_start must be >= 0")
        if self.g0 is not None and not self.g0 > 0:
            raise InvalidArgumentError("g0 must be positive")


def gamma_at(config: ConsensusConfig, alpha: float, epoch: int, alpha_max_ref: float | None = None) -> float:
    if epoch < config.e_start:
        return 1.0
    if config.g0 is not None:
        return min(1.0, max(0.0, config.g0 * alpha**config.p))
    if config.p == 0:
        return 1.0
    if alpha_max_ref is None or not alpha_max_ref > 0:
        raise InvalidArgumentError("alpha_max_ref must be positive once consensus adaptation is active")
    if alpha <= 0:
        return 0.0
    ratio = alpha / alpha_max_ref
    if ratio >= 1.0:
        return 1.0
    return ratio**config.p
