"""Dual-process episode runner.

A slow step (episode start, or the step after an ``Obs``) calls the reasoner,
which returns reasoning text plus a locomotion action. Fast steps take
actions from the policy, from a plan left by the reasoner, or from the
observation caps. Every ``Obs`` takes a panoramic scan and appends a landmark.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .env import GridMap, MetaAction, Point, Pose, panoramic, step
from .errors import PolicyFault
from .memory import MemoryGraph

SCHEMA_VERSION = 1


class Mode(str, enum.Enum):
    SLOW = "slow"
    FAST = "fast"


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    TIMEOUT = "Timeout"
    MISIDENTIFICATION = "Misidentification"
    RUNNING = "Running"


@dataclass(frozen=True)
class ControllerConfig:
    max_steps: int = 200
    success_radius: float = 1.0
    soft_obs_cap: int = 30
    hard_obs_cap: int = 35
    max_landmarks: int = 10
    action_tokens: int = 4
    schedule: str = "adaptive"  # "dense": reasoner runs at every step
    view_range: float = 5.0

    def __post_init__(self):
        if self.schedule not in ("adaptive", "dense"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.soft_obs_cap <= self.hard_obs_cap:
            raise ValueError("need 0 < soft_obs_cap <= hard_obs_cap")


@dataclass
class AgentContext:
    grid: GridMap
    goal: Point
    pose: Pose
    memory: MemoryGraph
    mode: Mode = Mode.SLOW
    fast_steps_since_obs: int = 0
    actions_since_landmark: list = field(default_factory=list)
    step: int = 0
    plan: deque = field(default_factory=deque)
    trace: list = field(default_factory=list)
    last_events: tuple = ()
    soft_obs_cap: int = 30


def should_force_obs(ctx: AgentContext) -> bool:
    """Soft observation trigger surfaced to policies; the hard cap is enforced by the runner."""
    return ctx.fast_steps_since_obs >= ctx.soft_obs_cap


@dataclass(frozen=True)
class ReasonerOutput:
    reasoning_text: str
    reasoning_tokens: int
    action: Optional[MetaAction] = None  # None defers to the fast policy
    plan: tuple = ()

    def __post_init__(self):
        if self.reasoning_tokens < 0:
            raise ValueError("reasoning_tokens must be non-negative")


class Policy(Protocol):
    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None: ...

    def act(self, ctx: AgentContext) -> MetaAction: ...


class Reasoner(Protocol):
    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None: ...

    def reason(self, ctx: AgentContext) -> ReasonerOutput: ...


# -- episode log -------------------------------------------------------------

def _opt_int(v):
    return None if v is None else int(v)


@dataclass(frozen=True)
class StepRecord:
    x: float
    y: float
    heading: int
    action: MetaAction
    mode: Mode
    reasoning_tokens: Optional[int] = 0
    action_tokens: Optional[int] = 4
    events: tuple[str, ...] = ()
    reasoning: Optional[str] = None

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.heading)

    def to_dict(self) -> dict:
        d = {
            "x": self.x, "y": self.y, "heading": self.heading,
            "action": self.action.value, "mode": self.mode.value,
            "events": list(self.events),
        }
        if self.reasoning_tokens is not None:
            d["reasoning_tokens"] = self.reasoning_tokens
        if self.action_tokens is not None:
            d["action_tokens"] = self.action_tokens
        if self.reasoning is not None:
            d["reasoning"] = self.reasoning
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            float(d["x"]), float(d["y"]), int(d["heading"]), MetaAction(d["action"]), Mode(d["mode"]),
            _opt_int(d.get("reasoning_tokens")), _opt_int(d.get("action_tokens")), tuple(d["events"]), d.get("reasoning"),
        )


@dataclass(frozen=True)
class Episode:
    map: str
    seed: int
    goal: Point
    start: Pose
    steps: tuple[StepRecord, ...]
    outcome: Outcome
    final: Pose
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.steps)

    @property
    def actions(self) -> list[MetaAction]:
        return [s.action for s in self.steps]

    @property
    def positions(self) -> list[Point]:
        return [(s.x, s.y) for s in self.steps]

    def to_dict(self) -> dict:
        d = {
            "kind": "episode", "version": SCHEMA_VERSION,
            "map": self.map, "seed": self.seed,
            "goal": {"x": self.goal[0], "y": self.goal[1]},
            "start": self.start.to_dict(),
            "outcome": self.outcome.value,
            "final": self.final.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
        }
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(
            d["map"], int(d["seed"]), (float(d["goal"]["x"]), float(d["goal"]["y"])),
            Pose.from_dict(d["start"]), tuple(StepRecord.from_dict(s) for s in d["steps"]),
            Outcome(d["outcome"]), Pose.from_dict(d["final"]), dict(d.get("meta", {})),
        )


def end_outcome(grid: GridMap, pose: Pose, success_radius: float = 1.0) -> Outcome:
    d = grid.distance_to_targets(pose.xy)
    return Outcome.SUCCESS if d <= success_radius + 1e-9 else Outcome.MISIDENTIFICATION


def episode_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# -- runner ------------------------------------------------------------------

Trigger = Callable[[AgentContext], Sequence[str]]


def _coerce(decision) -> MetaAction:
    if isinstance(decision, MetaAction):
        return decision
    try:
        return MetaAction(decision)
    except ValueError:
        raise PolicyFault(f"malformed decision {decision!r}") from None


def run_episode(
    grid: GridMap,
    start: Pose,
    goal: Point,
    policy: Policy,
    reasoner: Reasoner,
    config: ControllerConfig = ControllerConfig(),
    seed: int = 0,
    trigger: Trigger | None = None,
) -> Episode:
    """Run one episode of the slow/fast state machine.

    ``trigger`` is consulted on fast steps once at least one fast step has
    elapsed since the last slow step; any event it returns replaces the
    policy's decision with ``Obs``.
    """
    if not grid.is_free(start.xy):
        raise ValueError(f"start {start} is not on a free cell")
    policy.reset(grid, start, goal, episode_rng(seed, 1))
    reasoner.reset(grid, start, goal, episode_rng(seed, 2))

    def scan_at(pose):
        return lambda: panoramic(grid, pose, config.view_range)

    memory = MemoryGraph(max_landmarks=config.max_landmarks).append(start, 0, (), scan_at(start))
    ctx = AgentContext(grid, tuple(goal), start, memory, trace=[start.xy], soft_obs_cap=config.soft_obs_cap)
    steps: list[StepRecord] = []
    slow_next = True
    outcome = Outcome.TIMEOUT

    while len(steps) < config.max_steps:
        t = len(steps)
        ctx.step = t
        events: list[str] = []
        reasoning, tokens = None, 0
        if slow_next or config.schedule == "dense":
            ctx.mode = Mode.SLOW
            out = reasoner.reason(ctx)
            action = _coerce(out.action if out.action is not None else policy.act(ctx))
            if action is MetaAction.OBS:
                raise PolicyFault(f"slow step {t} produced Obs")
            ctx.plan = deque(_coerce(a) for a in out.plan)
            reasoning, tokens = out.reasoning_text, out.reasoning_tokens
            ctx.fast_steps_since_obs = 0
            slow_next = False
        else:
            ctx.mode = Mode.FAST
            fired = trigger(ctx) if trigger is not None and ctx.fast_steps_since_obs >= 1 else ()
            if fired:
                action = MetaAction.OBS
                events += list(fired)
            elif ctx.fast_steps_since_obs >= config.hard_obs_cap:
                action = MetaAction.OBS
                events.append("ForcedObs")
            elif ctx.plan:
                action = ctx.plan.popleft()
            else:
                action = _coerce(policy.act(ctx))

        new_pose, env_events = step(grid, ctx.pose, action)
        events += [e.value for e in env_events]
        if action is MetaAction.OBS:
            ctx.memory = ctx.memory.append(new_pose, t, ctx.actions_since_landmark, scan_at(new_pose))
            ctx.actions_since_landmark = []
            events.append("Landmark")
            slow_next = True
        elif action is not MetaAction.END:
            ctx.actions_since_landmark.append(action)
            if ctx.mode is Mode.FAST:
                ctx.fast_steps_since_obs += 1

        steps.append(StepRecord(
            ctx.pose.x, ctx.pose.y, ctx.pose.heading, action, ctx.mode,
            tokens, config.action_tokens, tuple(events), reasoning,
        ))
        ctx.pose = new_pose
        ctx.trace.append(new_pose.xy)
        ctx.last_events = tuple(env_events)
        if action is MetaAction.END:
            outcome = end_outcome(grid, new_pose, config.success_radius)
            break

    return Episode(grid.name, int(seed), tuple(goal), start, tuple(steps), outcome, ctx.pose)


def slow_step_count(ep: Episode) -> int:
    return sum(1 for s in ep.steps if s.mode is Mode.SLOW)


def max_fast_run(ep: Episode) -> int:
    """Longest run of fast locomotion steps between slow steps."""
    run = best = 0
    for s in ep.steps:
        if s.mode is Mode.SLOW or s.action is MetaAction.OBS:
            run = 0
        elif s.action.is_locomotion:
            run += 1
            best = max(best, run)
    return best


def goal_bearing(pose: Pose, goal: Point) -> float:
    return math.degrees(math.atan2(goal[1] - pose.y, goal[0] - pose.x))
