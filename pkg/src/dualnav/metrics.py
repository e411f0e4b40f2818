"""Success, path and time efficiency metrics, reasoning ratio and the tau sweep."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .controller import Episode, Mode, Outcome
from .env import MOVE_STEP, Event, GridMap, MetaAction
from .errors import CompileError, MissingTokenCounts, NoPath
from .planner import optimal_time
from .timemodel import TimeModel

DEFAULT_TAUS = (0.0075, 0.015, 0.03, 0.06, 0.12, 0.24, 0.48)


def t_phys(ep: Episode | Sequence, tm: TimeModel = TimeModel()) -> float:
    actions = ep.actions if isinstance(ep, Episode) else ep
    return math.fsum(tm.cost(a) for a in actions)


def token_total(ep: Episode) -> int:
    total = 0
    for i, s in enumerate(ep.steps):
        if s.reasoning_tokens is None or s.action_tokens is None:
            raise MissingTokenCounts(f"step {i} of episode seed={ep.seed} on {ep.map} lacks token counts")
        total += s.reasoning_tokens + s.action_tokens
    return total


def t_inf(ep: Episode, tm: TimeModel = TimeModel()) -> float:
    return tm.tau_s_per_token * token_total(ep)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def success(ep: Episode) -> bool:
    return ep.outcome is Outcome.SUCCESS


def sr(episodes: Sequence[Episode]) -> float:
    return _mean(1.0 if success(e) else 0.0 for e in episodes)


def path_length(ep: Episode) -> float:
    """Translation actually covered: MoveAhead steps that did not collide."""
    n = sum(1 for s in ep.steps if s.action is MetaAction.MOVE_AHEAD and Event.COLLISION.value not in s.events)
    return MOVE_STEP * n


def shortest_length(grid: GridMap, ep: Episode) -> float:
    return grid.distance_to_targets(ep.start.xy)


def spl_episode(ep: Episode, l_opt: float) -> float:
    if not success(ep):
        return 0.0
    denom = max(l_opt, path_length(ep))
    return 1.0 if denom == 0 else l_opt / denom


def spl(episodes: Sequence[Episode], maps: Mapping[str, GridMap]) -> float:
    return _mean(spl_episode(e, shortest_length(maps[e.map], e)) for e in episodes)


def reasoning_ratio(episodes: Sequence[Episode]) -> float:
    """Slow-system invocations over logged steps, pooled across episodes."""
    steps = sum(len(e.steps) for e in episodes)
    slow = sum(1 for e in episodes for s in e.steps if s.mode is Mode.SLOW)
    return slow / steps if steps else 0.0


def sot_episode(ep: Episode, t_opt: float, tm: TimeModel = TimeModel()) -> float:
    if not success(ep):
        return 0.0
    return t_opt / (t_phys(ep, tm) + t_inf(ep, tm))


class OptimalTimes:
    """Cache of optimal times keyed by (map, start pose); ``None`` marks unsolvable starts."""

    def __init__(self, maps: Mapping[str, GridMap], tm: TimeModel = TimeModel()):
        self.maps, self.tm, self._cache = maps, tm, {}

    def __call__(self, ep: Episode) -> float | None:
        key = (ep.map, ep.start)
        if key not in self._cache:
            try:
                self._cache[key] = optimal_time(self.maps[ep.map], ep.start, tm=self.tm)
            except (NoPath, CompileError):
                self._cache[key] = None
        return self._cache[key]


def sot_detail(episodes: Sequence[Episode], maps: Mapping[str, GridMap], tm: TimeModel = TimeModel(),
               t_opt: OptimalTimes | None = None) -> tuple[float, int]:
    """SOT over solvable episodes and the number of unsolvable episodes left out."""
    t_opt = t_opt or OptimalTimes(maps, tm)
    vals, excluded = [], 0
    for e in episodes:
        opt = t_opt(e)
        if opt is None:
            excluded += 1
            continue
        vals.append(sot_episode(e, opt, tm))
    return _mean(vals), excluded


def sot(episodes: Sequence[Episode], maps: Mapping[str, GridMap], tm: TimeModel = TimeModel()) -> float:
    return sot_detail(episodes, maps, tm)[0]


def tau_sweep(episodes: Sequence[Episode], maps: Mapping[str, GridMap], taus: Sequence[float] = DEFAULT_TAUS,
              tm: TimeModel = TimeModel(), t_opt: OptimalTimes | None = None) -> list[tuple[float, float, float]]:
    """(tau, SOT, SR) rows recomputed from logged token counts."""
    if not taus:
        raise ValueError("tau grid is empty")
    if any(not t > 0 for t in taus):
        raise ValueError("every tau must be positive")
    t_opt = t_opt or OptimalTimes(maps, tm)
    rate = sr(episodes)
    return [(float(t), sot_detail(episodes, maps, tm.with_tau(t), t_opt)[0], rate) for t in taus]


@dataclass
class MetricsReport:
    n_episodes: int
    sr: float
    spl: float
    sot: float
    reasoning_ratio: float
    n_excluded: int = 0
    rows: list = field(default_factory=list)
    tau_sweep: list | None = None

    def metric_rows(self) -> list[tuple[str, object]]:
        return [
            ("n_episodes", self.n_episodes),
            ("n_excluded", self.n_excluded),
            ("sr", self.sr),
            ("spl", self.spl),
            ("sot", self.sot),
            ("reasoning_ratio", self.reasoning_ratio),
        ]

    def to_csv(self) -> str:
        return _csv(("metric", "value"), self.metric_rows())

    def sweep_csv(self) -> str:
        return _csv(("tau", "sot", "sr"), self.tau_sweep or [])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def evaluate(episodes: Sequence[Episode], maps: Mapping[str, GridMap], tm: TimeModel = TimeModel(),
             taus: Sequence[float] | None = None) -> MetricsReport:
    t_opt = OptimalTimes(maps, tm)
    rows = []
    for e in episodes:
        opt = t_opt(e)
        rows.append({
            "map": e.map, "seed": e.seed, "outcome": e.outcome.value,
            "t_phys": t_phys(e, tm), "t_inf": t_inf(e, tm), "t_optimal": opt,
            "spl": spl_episode(e, shortest_length(maps[e.map], e)),
            "sot": None if opt is None else sot_episode(e, opt, tm),
        })
    value, excluded = sot_detail(episodes, maps, tm, t_opt)
    return MetricsReport(
        len(episodes), sr(episodes), spl(episodes, maps), value, reasoning_ratio(episodes), excluded, rows,
        tau_sweep(episodes, maps, taus, tm, t_opt) if taus else None,
    )
