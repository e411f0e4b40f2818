"""Per-action physical time costs and token latency."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

from .env import MetaAction


@dataclass(frozen=True)
class TimeModel:
    move_ahead_s: float = 1.0
    rotate_s: float = 0.6
    obs_s: float = 4.0
    stop_s: float = 0.1
    tau_s_per_token: float = 0.015

    def __post_init__(self):
        for name in ("move_ahead_s", "rotate_s", "obs_s", "stop_s", "tau_s_per_token"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def cost(self, action) -> float:
        action = MetaAction(action)
        if action is MetaAction.MOVE_AHEAD:
            return self.move_ahead_s
        if action is MetaAction.OBS:
            return self.obs_s
        if action is MetaAction.END:
            return self.stop_s
        return self.rotate_s

    def with_tau(self, tau: float) -> "TimeModel":
        return replace(self, tau_s_per_token=tau)


def actions_time(actions: Iterable, tm: TimeModel = TimeModel()) -> float:
    """Sum of physical action costs; End is priced as Stop."""
    return math.fsum(tm.cost(a) for a in actions)
