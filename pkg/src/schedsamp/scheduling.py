"""Teacher-forcing probability schedules and the warmup learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, ContractError

SCHEDULE_KINDS = ("linear", "exponential", "inverse_sigmoid", "constant")


@dataclass(frozen=True)
class TeacherForcingSchedule:
    """Maps a training step to the probability of keeping the gold token.

    ``k`` is the offset for linear decay, the base for exponential decay, the
    rate constant for inverse sigmoid decay and the value itself for
    ``constant``. ``c`` is the linear slope; ``epsilon`` floors every decaying
    kind. The first ``pure_tf_steps`` steps always return 1.
    """

    kind: str = "linear"
    epsilon: float = 0.0
    k: float = 1.0
    c: float = 0.0
    pure_tf_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected one of {', '.join(SCHEDULE_KINDS)}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.pure_tf_steps < 0:
            raise ConfigError("pure_tf_steps must be >= 0")
        if self.kind == "linear" and self.c < 0:
            raise ConfigError(f"linear slope c must be >= 0, got {self.c}")
        if self.kind == "exponential" and not 0.0 < self.k < 1.0:
            raise ConfigError(f"exponential decay needs 0 < k < 1, got {self.k}")
        if self.kind == "inverse_sigmoid" and self.k < 1.0:
            raise ConfigError(f"inverse sigmoid decay needs k >= 1, got {self.k}")
        if self.kind == "constant" and not 0.0 <= self.k <= 1.0:
            raise ConfigError(f"constant schedule needs 0 <= k <= 1, got {self.k}")

    @classmethod
    def constant(cls, value: float) -> TeacherForcingSchedule:
        return cls(kind="constant", k=value)

    def __call__(self, step: int) -> float:
        return tf_probability(self, step)


def tf_probability(schedule: TeacherForcingSchedule, step: int) -> float:
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step < schedule.pure_tf_steps:
        return 1.0
    j = step - schedule.pure_tf_steps
    eps, k = schedule.epsilon, schedule.k
    if schedule.kind == "linear":
        t = max(eps, k - schedule.c * j)
    elif schedule.kind == "exponential":
        t = max(eps, k ** j)
    elif schedule.kind == "inverse_sigmoid":
        # exp overflows long after the value has hit the floor
        t = eps if j / k > 700 else max(eps, k / (k + math.exp(j / k)))
    else:
        t = k
    return min(1.0, max(0.0, t))


def learning_rate(step: int, d_model: int, warmup_steps: int, scale: float = 1.0) -> float:
    """Inverse-square-root decay after a linear warmup."""
    if step < 1:
        raise ContractError(f"learning rate is defined from step 1, got {step}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)
