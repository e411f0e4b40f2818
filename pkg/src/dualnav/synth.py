"""Stagnation-triggered rollouts and collect-and-repair data generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controller import (
    AgentContext,
    ControllerConfig,
    Episode,
    Mode,
    Outcome,
    Policy,
    Reasoner,
    StepRecord,
    end_outcome,
    episode_rng,
    run_episode,
)
from .env import Event, GridMap, MetaAction, Point, Pose, step
from .errors import CompileError, DualNavError, NoPath
from .memory import MemoryGraph
from .planner import nearest_target, plan_actions

REPAIR_MAX_STEPS = 400
REPETITIVE = "Repetitive"
NO_PROGRESS = "NoProgress"


@dataclass(frozen=True)
class StagnationConfig:
    t_stag: int = 20
    delta_stag: float = 0.5
    dt_low: int = 20
    dt_high: int = 35
    seed: int = 0

    def __post_init__(self):
        if self.dt_low < 1 or self.dt_high < self.dt_low:
            raise ValueError("need 1 <= dt_low <= dt_high")
        if self.t_stag < 0 or self.delta_stag < 0:
            raise ValueError("t_stag and delta_stag must be non-negative")


@dataclass(frozen=True)
class StagnationEvent:
    t: int
    kind: str
    witness: int  # matched step k, or the sampled dt


def _xy(p) -> Point:
    return p.xy if isinstance(p, Pose) else (float(p[0]), float(p[1]))


def detect_repetitive(trace: Sequence, t: int, cfg: StagnationConfig = StagnationConfig()) -> Optional[StagnationEvent]:
    """Event iff some k <= t - t_stag has ||p_t - p_k|| <= delta_stag; witness is the smallest k."""
    if not 0 <= t < len(trace):
        raise IndexError(f"t={t} outside trace of length {len(trace)}")
    last = t - cfg.t_stag
    if last < 0:
        return None
    pts = np.array([_xy(p) for p in trace[: last + 1]])
    x, y = _xy(trace[t])
    d = np.sqrt((pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2)
    hits = np.flatnonzero(d <= cfg.delta_stag + 1e-9)
    if len(hits) == 0:
        return None
    return StagnationEvent(t, REPETITIVE, int(hits[0]))


def sample_dt(rng: np.random.Generator, t: int, cfg: StagnationConfig = StagnationConfig()) -> int:
    return min(int(rng.integers(cfg.dt_low, cfg.dt_high + 1)), t)


def dt_stream(episode_seed: int, t: int, cfg: StagnationConfig = StagnationConfig()) -> np.random.Generator:
    """RNG for the dt draw at step t; keyed by step so post-hoc scans reproduce online draws."""
    return np.random.default_rng([cfg.seed, episode_seed, t, 3])


def detect_no_progress(
    trace: Sequence,
    t: int,
    grid: GridMap,
    cfg: StagnationConfig = StagnationConfig(),
    rng: np.random.Generator | None = None,
    dt: int | None = None,
) -> Optional[StagnationEvent]:
    """Event iff the geodesic distance to the targets at step t exceeds that at t - dt."""
    if not 0 <= t < len(trace):
        raise IndexError(f"t={t} outside trace of length {len(trace)}")
    if t < cfg.dt_low:
        return None
    if dt is None:
        dt = sample_dt(rng if rng is not None else np.random.default_rng(), t, cfg)
    now = grid.distance_to_targets(_xy(trace[t]))
    before = grid.distance_to_targets(_xy(trace[t - dt]))
    if now > before:
        return StagnationEvent(t, NO_PROGRESS, dt)
    return None


def stagnation_events(trace: Sequence, t: int, grid: GridMap, cfg: StagnationConfig, episode_seed: int) -> list[StagnationEvent]:
    out = []
    rep = detect_repetitive(trace, t, cfg)
    if rep:
        out.append(rep)
    if t >= cfg.dt_low:
        nop = detect_no_progress(trace, t, grid, cfg, dt_stream(episode_seed, t, cfg))
        if nop:
            out.append(nop)
    return out


class StagnationTrigger:
    """Controller hook that forces an observation whenever a detector fires."""

    def __init__(self, grid: GridMap, cfg: StagnationConfig, episode_seed: int):
        self.grid, self.cfg, self.seed = grid, cfg, episode_seed

    def __call__(self, ctx: AgentContext) -> list[str]:
        t = len(ctx.trace) - 1
        return [e.kind for e in stagnation_events(ctx.trace, t, self.grid, self.cfg, self.seed)]


def rollout_with_stagnation(
    grid: GridMap,
    start: Pose,
    goal: Point,
    policy: Policy,
    reasoner: Reasoner,
    config: ControllerConfig = ControllerConfig(),
    stag: StagnationConfig = StagnationConfig(),
    seed: int = 0,
) -> Episode:
    return run_episode(grid, start, goal, policy, reasoner, config, seed, StagnationTrigger(grid, stag, seed))


def classify_failure(ep: Episode, grid: GridMap, delta_success: float = 1.0, max_steps: int = 200) -> Outcome:
    if ep.steps and ep.steps[-1].action is MetaAction.END:
        return end_outcome(grid, ep.final, delta_success)
    if len(ep.steps) >= max_steps:
        return Outcome.TIMEOUT
    return Outcome.RUNNING


# -- intervention and repair -------------------------------------------------

@dataclass(frozen=True)
class Intervention:
    t_star: int  # 1-based step number whose action is replaced
    kind: Outcome
    fallback: bool = False

    @property
    def index(self) -> int:
        return self.t_star - 1


def stagnation_points(ep: Episode, grid: GridMap, cfg: StagnationConfig = StagnationConfig()) -> list[int]:
    """0-based step indices at which either detector fires, re-scanned over the whole log."""
    trace = ep.positions
    return [t for t in range(len(trace)) if stagnation_events(trace, t, grid, cfg, ep.seed)]


def find_intervention(ep: Episode, grid: GridMap, cfg: StagnationConfig = StagnationConfig(), delta_success: float = 1.0) -> Intervention:
    kind = classify_failure(ep, grid, delta_success, max_steps=len(ep.steps) or 1)
    if kind is Outcome.SUCCESS:
        raise ValueError("episode succeeded; nothing to repair")
    if not ep.steps:
        raise ValueError("episode has no steps")
    if kind is Outcome.MISIDENTIFICATION:
        return Intervention(len(ep.steps), kind)
    trace = ep.positions
    points = stagnation_points(ep, grid, cfg)
    fallback = not points
    pool = points if points else range(len(trace))
    best = min(pool, key=lambda t: (grid.distance_to_targets(trace[t]), t))
    return Intervention(best + 1, Outcome.TIMEOUT, fallback)


@dataclass(frozen=True)
class RepairOutcome:
    variant: str  # KeptAsIs | Repaired | Dropped
    t_star: Optional[int] = None
    spliced: int = 0
    reason: Optional[str] = None
    fallback: bool = False


def _memory_upto(ep: Episode, index: int, max_landmarks: int) -> MemoryGraph:
    mem = MemoryGraph(max_landmarks=max_landmarks).append(ep.start, 0)
    since: list[MetaAction] = []
    for t, s in enumerate(ep.steps[:index]):
        if s.action is MetaAction.OBS and t > 0:
            mem = mem.append(s.pose, t, since)
            since = []
        elif s.action.is_locomotion:
            since.append(s.action)
    return mem


def repair(
    ep: Episode,
    grid: GridMap,
    reasoner: Reasoner,
    config: ControllerConfig = ControllerConfig(),
    stag: StagnationConfig = StagnationConfig(),
    max_steps: int = REPAIR_MAX_STEPS,
) -> tuple[RepairOutcome, Optional[Episode]]:
    """Splice an optimal leg onto a failed episode at its intervention point."""
    if classify_failure(ep, grid, config.success_radius, config.max_steps) is Outcome.SUCCESS:
        return RepairOutcome("KeptAsIs"), ep
    iv = find_intervention(ep, grid, stag, config.success_radius)
    i = iv.index
    prefix = list(ep.steps[:i])
    pose = ep.steps[i].pose

    def dropped(reason, spliced=0):
        return RepairOutcome("Dropped", iv.t_star, spliced, reason, iv.fallback), None

    try:
        target = nearest_target(grid, pose.xy)
        leg = plan_actions(grid, pose, target) + [MetaAction.END]
    except NoPath:
        return dropped("disconnected")
    except CompileError:
        return dropped("splice-failure")

    reasoner.reset(grid, ep.start, ep.goal, episode_rng(ep.seed, 4))
    ctx = AgentContext(grid, tuple(target), pose, _memory_upto(ep, i, config.max_landmarks), soft_obs_cap=config.soft_obs_cap)
    new: list[StepRecord] = []

    def emit(action, mode, events=(), reasoning=None, tokens=0):
        nonlocal pose
        nxt, env_events = step(grid, pose, action)
        new.append(StepRecord(pose.x, pose.y, pose.heading, action, mode, tokens, config.action_tokens,
                              tuple(events) + tuple(e.value for e in env_events), reasoning))
        if action is MetaAction.OBS:
            at = i + len(new) - 1
            if at > ctx.memory.landmarks[-1].step_index:
                ctx.memory = ctx.memory.append(nxt, at, since)
            since.clear()
        elif action.is_locomotion:
            since.append(action)
        pose = nxt
        return env_events

    since: list[MetaAction] = []
    for s in reversed(prefix):
        if s.action is MetaAction.OBS:
            break
        if s.action.is_locomotion:
            since.insert(0, s.action)
    emit(MetaAction.OBS, Mode.FAST, ("Repair", "Landmark"))
    collided = False
    slow_due, fast = True, 0
    for action in leg:
        if not slow_due and fast >= config.hard_obs_cap:
            emit(MetaAction.OBS, Mode.FAST, ("ForcedObs", "Landmark"))
            slow_due = True
        if slow_due:
            ctx.pose, ctx.step, ctx.mode = pose, i + len(new), Mode.SLOW
            out = reasoner.reason(ctx)
            collided |= Event.COLLISION in emit(action, Mode.SLOW, (), out.reasoning_text, out.reasoning_tokens)
            slow_due, fast = False, 0
        else:
            collided |= Event.COLLISION in emit(action, Mode.FAST)
            fast += 1

    steps = tuple(prefix + new)
    if len(steps) > max_steps:
        return dropped("length", len(new))
    if collided or end_outcome(grid, pose, config.success_radius) is not Outcome.SUCCESS:
        return dropped("splice-failure", len(new))
    meta = dict(ep.meta)
    meta["repair"] = {"t_star": iv.t_star, "kind": iv.kind.value, "fallback": iv.fallback,
                      "spliced": len(new), "target": {"x": target[0], "y": target[1]}}
    repaired = Episode(ep.map, ep.seed, ep.goal, ep.start, steps, Outcome.SUCCESS, pose, meta)
    return RepairOutcome("Repaired", iv.t_star, len(new), None, iv.fallback), repaired


# -- collect and repair ------------------------------------------------------

DROP_REASONS = ("length", "disconnected", "splice-failure")


@dataclass
class RoundReport:
    n_rollouts: int = 0
    n_success_raw: int = 0
    n_repaired: int = 0
    n_dropped: dict = field(default_factory=lambda: {r: 0 for r in DROP_REASONS})
    n_faults: int = 0
    n_fallback: int = 0

    @property
    def sr_raw(self) -> float:
        return self.n_success_raw / self.n_rollouts if self.n_rollouts else 0.0

    @property
    def sr_final(self) -> float:
        return (self.n_success_raw + self.n_repaired) / self.n_rollouts if self.n_rollouts else 0.0

    def merge(self, other: "RoundReport") -> "RoundReport":
        return RoundReport(
            self.n_rollouts + other.n_rollouts,
            self.n_success_raw + other.n_success_raw,
            self.n_repaired + other.n_repaired,
            {r: self.n_dropped[r] + other.n_dropped[r] for r in DROP_REASONS},
            self.n_faults + other.n_faults,
            self.n_fallback + other.n_fallback,
        )

    def to_dict(self) -> dict:
        return {
            "n_rollouts": self.n_rollouts,
            "n_success_raw": self.n_success_raw,
            "n_repaired": self.n_repaired,
            "n_dropped": {r.replace("-", "_"): n for r, n in self.n_dropped.items()},
            "n_faults": self.n_faults,
            "n_fallback": self.n_fallback,
            "sr_raw": self.sr_raw,
            "sr_final": self.sr_final,
        }


@dataclass(frozen=True)
class Task:
    grid: GridMap
    start: Pose
    goal: Point


def derive_seed(seed: int, index: int) -> int:
    """Per-episode seed from the suite seed and episode index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class RoundItem:
    index: int
    raw: Optional[Episode]
    outcome: Optional[RepairOutcome]
    episode: Optional[Episode]
    fault: Optional[str] = None


def irft_item(
    index: int,
    task: Task,
    policy: Policy,
    reasoner: Reasoner,
    config: ControllerConfig = ControllerConfig(),
    stag: StagnationConfig = StagnationConfig(),
    seed: int = 0,
) -> RoundItem:
    ep_seed = derive_seed(seed, index)
    try:
        raw = rollout_with_stagnation(task.grid, task.start, task.goal, policy, reasoner, config, stag, ep_seed)
        outcome, fixed = repair(raw, task.grid, reasoner, config, stag)
    except DualNavError as exc:
        return RoundItem(index, None, None, None, f"{type(exc).__name__}: {exc}")
    return RoundItem(index, raw, outcome, fixed)


def summarize(items: Sequence[RoundItem]) -> RoundReport:
    rep = RoundReport()
    for it in items:
        rep.n_rollouts += 1
        if it.fault:
            rep.n_faults += 1
            continue
        if it.outcome.fallback:
            rep.n_fallback += 1
        if it.outcome.variant == "KeptAsIs":
            rep.n_success_raw += 1
        elif it.outcome.variant == "Repaired":
            rep.n_repaired += 1
        else:
            rep.n_dropped[it.outcome.reason] += 1
    return rep


def irft_round(
    tasks: Sequence[Task],
    policy: Policy,
    reasoner: Reasoner,
    n: int,
    config: ControllerConfig = ControllerConfig(),
    stag: StagnationConfig = StagnationConfig(),
    seed: int = 0,
) -> tuple[list[Episode], RoundReport, list[RoundItem]]:
    """Roll out ``n`` episodes over ``tasks`` (round-robin), keep successes, repair failures."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not tasks:
        raise ValueError("no tasks given")
    items = [irft_item(k, tasks[k % len(tasks)], policy, reasoner, config, stag, seed) for k in range(n)]
    episodes = [it.episode for it in items if it.episode is not None]
    return episodes, summarize(items), items

