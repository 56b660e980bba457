"""PID control of the Lagrange multiplier."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class PidState:
    kp: float = 0.1
    ki: float = 0.003
    kd: float = 0.001
    cost_limit: float = 10.0
    lam: float = 0.0
    integral: float = 0.0
    prev_cost: float = 0.0
    # last error terms, kept for logging
    delta: float = 0.0
    derivative: float = 0.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0.0:
            raise ValueError("PID gains must be non-negative")
        if self.lam < 0.0 or self.integral < 0.0:
            raise ValueError("multiplier and integral must be non-negative")


def update_lambda(state: PidState, episode_cost: float) -> PidState:
    """One epoch of the clamped PID multiplier update.

    error = J_C - d; derivative = (J_C - J_prev)_+; I = (I + error)_+;
    lambda = (kp*error + ki*I + kd*derivative)_+.
    """
    cost = float(episode_cost)
    if not math.isfinite(cost) or cost < 0.0:
        raise ValueError(f"episode cost must be finite and non-negative, got {episode_cost}")
    delta = cost - state.cost_limit
    derivative = max(cost - state.prev_cost, 0.0)
    integral = max(state.integral + delta, 0.0)
    lam = max(state.kp * delta + state.ki * integral + state.kd * derivative, 0.0)
    return replace(state, lam=lam, integral=integral, prev_cost=cost, delta=delta, derivative=derivative)
