"""Deterministic stand-ins for the fast policy and the slow reasoner."""
from __future__ import annotations

import math

import numpy as np

from .controller import AgentContext, ReasonerOutput, goal_bearing
from .env import GridMap, MetaAction, Point, Pose, step
from .errors import CompileError, NoPath
from .planner import nearest_target, plan_actions, turns_toward

STUB_TOKENS = 150
_LOCOMOTION = (MetaAction.MOVE_AHEAD, MetaAction.ROTATE_LEFT, MetaAction.ROTATE_RIGHT)


def token_count(text: str) -> int:
    """Whitespace tokenization used for every reasoning record."""
    return len(text.split())


def compose_reasoning(goal: Point, n_landmarks: int, bearing: float, tokens: int = STUB_TOKENS) -> str:
    """Fixed-template reasoning text with exactly ``tokens`` whitespace tokens."""
    words = (
        f"<think_start> The goal is the target near ({goal[0]:.2f}, {goal[1]:.2f}). "
        f"Memory holds {n_landmarks} landmarks. "
        f"The next leg bears {bearing:.0f} degrees, so I will turn toward it and keep exploring. <think_end>"
    ).split()
    if len(words) >= tokens:
        return " ".join(words[:tokens])
    return " ".join(words[:-1] + ["..."] * (tokens - len(words)) + words[-1:])


# -- policies ----------------------------------------------------------------

class OraclePolicy:
    """Follows a compiled A* path to the goal and ends on arrival.

    Replans from the current pose whenever it drifts off its expected pose.
    """

    name = "oracle"

    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None:
        self.grid, self.goal = grid, tuple(goal)
        self._queue: list[MetaAction] = []
        self._expect: Pose | None = None

    def _replan(self, pose: Pose) -> None:
        try:
            self._queue = plan_actions(self.grid, pose, self.goal) + [MetaAction.END]
        except (NoPath, CompileError):
            self._queue = [MetaAction.END]

    def act(self, ctx: AgentContext) -> MetaAction:
        if ctx.pose != self._expect or not self._queue:
            self._replan(ctx.pose)
        action = self._queue.pop(0)
        self._expect, _ = step(self.grid, ctx.pose, action)
        return action


class GreedyPolicy:
    """Turns toward the Euclidean goal bearing, then moves; random action with probability ``noise``."""

    name = "greedy"

    def __init__(self, noise: float = 0.0, end_radius: float = 0.25):
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        self.noise = noise
        self.end_radius = end_radius

    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None:
        self.goal = tuple(goal)
        self.rng = rng

    def act(self, ctx: AgentContext) -> MetaAction:
        draw = self.rng.random()
        pick = int(self.rng.integers(len(_LOCOMOTION)))
        if draw < self.noise:
            return _LOCOMOTION[pick]
        pose = ctx.pose
        if math.dist(pose.xy, self.goal) <= self.end_radius:
            return MetaAction.END
        turns = turns_toward(pose.heading, goal_bearing(pose, self.goal))
        if turns > 0:
            return MetaAction.ROTATE_LEFT
        if turns < 0:
            return MetaAction.ROTATE_RIGHT
        return MetaAction.MOVE_AHEAD


_PATTERNS = {
    "spin": (MetaAction.ROTATE_LEFT,),
    "pace": (MetaAction.MOVE_AHEAD,) * 2 + (MetaAction.ROTATE_LEFT,) * 6,
    "wall": (MetaAction.MOVE_AHEAD,),
}


class StuckPolicy:
    """Cycles a fixed action pattern and never ends."""

    name = "stuck"

    def __init__(self, pattern: str = "pace"):
        if pattern not in _PATTERNS:
            raise ValueError(f"unknown pattern {pattern!r}; choose from {sorted(_PATTERNS)}")
        self.pattern = pattern

    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None:
        self._i = 0

    def act(self, ctx: AgentContext) -> MetaAction:
        seq = _PATTERNS[self.pattern]
        action = seq[self._i % len(seq)]
        self._i += 1
        return action


# -- reasoners ---------------------------------------------------------------

class StubReasoner:
    """Template reasoning; the motor action is left to the fast policy."""

    name = "stub"

    def __init__(self, tokens: int = STUB_TOKENS):
        self.tokens = tokens

    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None:
        pass

    def reason(self, ctx: AgentContext) -> ReasonerOutput:
        text = compose_reasoning(ctx.goal, len(ctx.memory), goal_bearing(ctx.pose, ctx.goal), self.tokens)
        return ReasonerOutput(text, token_count(text))


class OracleReasoner:
    """Replans to the geodesically nearest target and hands the plan to the fast system.

    With ``horizon`` set only the first ``horizon`` actions are handed over.
    """

    name = "oracle"

    def __init__(self, horizon: int | None = None, tokens: int = STUB_TOKENS):
        self.horizon = horizon
        self.tokens = tokens

    def reset(self, grid: GridMap, start: Pose, goal: Point, rng: np.random.Generator) -> None:
        self.grid = grid

    def reason(self, ctx: AgentContext) -> ReasonerOutput:
        try:
            target = nearest_target(self.grid, ctx.pose.xy)
            acts = plan_actions(self.grid, ctx.pose, target) + [MetaAction.END]
        except (NoPath, CompileError):
            target, acts = ctx.goal, []
        text = compose_reasoning(target, len(ctx.memory), goal_bearing(ctx.pose, target), self.tokens)
        if self.horizon is not None:
            acts = acts[: self.horizon]
        if not acts:
            return ReasonerOutput(text, token_count(text))
        return ReasonerOutput(text, token_count(text), acts[0], tuple(acts[1:]))


POLICIES = {"oracle": OraclePolicy, "greedy": GreedyPolicy, "stuck": StuckPolicy}
REASONERS = {"stub": StubReasoner, "oracle": OracleReasoner}


def make_policy(name: str, **kwargs):
    try:
        return POLICIES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None


def make_reasoner(name: str, **kwargs):
    try:
        return REASONERS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown reasoner {name!r}; choose from {sorted(REASONERS)}") from None

