"""A* on the occupancy grid and compilation of cell paths into meta actions."""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

from .env import (
    MOVE_STEP,
    SQRT2,
    TURN_STEP,
    Cell,
    Event,
    GridMap,
    MetaAction,
    Point,
    Pose,
    angle_diff,
    step,
)
from .errors import CompileError, NoPath
from .timemodel import TimeModel, actions_time

ARRIVE_RADIUS = 0.125
LATTICE_BIN = 0.05
LATTICE_MAX_EXPANSIONS = 150_000


@dataclass(frozen=True)
class CellPath:
    cells: tuple[Cell, ...]
    straight: int
    diagonal: int
    resolution: float

    @property
    def cost(self) -> tuple[int, int]:
        """Exact cost as (straight steps, diagonal steps)."""
        return (self.straight, self.diagonal)

    @property
    def length_m(self) -> float:
        return (self.straight + self.diagonal * SQRT2) * self.resolution


def octile(a: Cell, b: Cell) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dr, dc) - min(dr, dc) + SQRT2 * min(dr, dc)


def astar(grid: GridMap, p: Point, q: Point) -> CellPath:
    start, goal = grid.cell_of(p), grid.cell_of(q)
    if not grid.cell_free(start) or not grid.cell_free(goal):
        raise NoPath(f"endpoint on an obstacle or outside the map: {p} -> {q}")
    counter = itertools.count()
    # costs tracked exactly as (straight, diagonal) pairs
    best = {start: (0, 0)}
    parent = {start: None}
    heap = [(octile(start, goal), 0.0, next(counter), start)]
    closed = set()
    while heap:
        _, g, _, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        if cell == goal:
            break
        closed.add(cell)
        s, d = best[cell]
        for nxt, diag in grid.neighbours(cell):
            if nxt in closed:
                continue
            cand = (s, d + 1) if diag else (s + 1, d)
            gv = cand[0] + cand[1] * SQRT2
            old = best.get(nxt)
            if old is None or gv < old[0] + old[1] * SQRT2:
                best[nxt] = cand
                parent[nxt] = cell
                heapq.heappush(heap, (gv + octile(nxt, goal), gv, next(counter), nxt))
    if goal not in best:
        raise NoPath(f"no path from {start} to {goal}")
    cells = [goal]
    while parent[cells[-1]] is not None:
        cells.append(parent[cells[-1]])
    cells.reverse()
    s, d = best[goal]
    return CellPath(tuple(cells), s, d, grid.resolution)


# -- action compilation ----------------------------------------------------

def turns_toward(heading: int, bearing: float) -> int:
    """Signed count of 30-degree turns (+ = left) bringing heading within 15 degrees of bearing.

    An exact reversal resolves to left turns.
    """
    diff = angle_diff(bearing, heading)
    mag = abs(diff)
    if mag <= 15.0 + 1e-9:
        return 0
    n = math.ceil((mag - 15.0 - 1e-9) / TURN_STEP)
    return n if diff > 0 else -n


def rotation_actions(turns: int) -> list[MetaAction]:
    act = MetaAction.ROTATE_LEFT if turns > 0 else MetaAction.ROTATE_RIGHT
    return [act] * abs(turns)


def _dist(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _bearing(a: Point, b: Point) -> float:
    return math.degrees(math.atan2(b[1] - a[1], b[0] - a[0]))


def _advance(pose: Pose, heading: int) -> Pose:
    rad = math.radians(heading)
    return Pose(round(pose.x + MOVE_STEP * math.cos(rad), 9) + 0.0,
                round(pose.y + MOVE_STEP * math.sin(rad), 9) + 0.0, heading)


def _carrot_compile(centers: Sequence[Point], start: Pose, grid: GridMap | None) -> list[MetaAction]:
    goal = centers[-1]
    pose = start
    actions: list[MetaAction] = []
    progress = 0
    window = 8
    budget = 4 * len(centers) + 64
    moves = 0
    while True:
        hi = min(len(centers), progress + window)
        progress = min(range(progress, hi), key=lambda j: (_dist(pose.xy, centers[j]), j))
        remaining = _dist(pose.xy, goal)
        if remaining <= 1e-6:
            return actions
        carrot = goal
        for j in range(progress, len(centers)):
            if _dist(pose.xy, centers[j]) >= MOVE_STEP:
                carrot = centers[j]
                break
        bearing = _bearing(pose.xy, carrot)
        preferred = (pose.heading + TURN_STEP * turns_toward(pose.heading, bearing)) % 360
        final_leg = carrot == goal
        if final_leg and _dist(_advance(pose, preferred).xy, goal) >= remaining:
            return actions
        options = sorted(
            range(0, 360, TURN_STEP),
            key=lambda h: (abs(angle_diff(h, preferred)), angle_diff(h, preferred) < 0),
        )
        chosen = None
        here = _dist(pose.xy, carrot)
        for h in options:
            if abs(angle_diff(h, bearing)) > 90.0:
                break
            turned = pose.rotated(h - pose.heading) if h != pose.heading else pose
            if grid is None:
                chosen = (h, _advance(pose, h))
                break
            moved, events = step(grid, turned, MetaAction.MOVE_AHEAD)
            if events:
                continue
            if h == preferred or _dist(moved.xy, carrot) < here:
                chosen = (h, moved)
                break
        if chosen is None:
            raise CompileError(f"carrot compile stuck at {pose}")
        h, moved = chosen
        actions += rotation_actions(_turns_between(pose.heading, h))
        actions.append(MetaAction.MOVE_AHEAD)
        pose = moved
        moves += 1
        if moves > budget:
            raise CompileError("carrot compile exceeded its move budget")


def _turns_between(heading: int, target: int) -> int:
    diff = angle_diff(target, heading)
    n = round(abs(diff) / TURN_STEP)
    return n if diff > 0 else -n


def _lattice_compile(grid: GridMap, start: Pose, goal_cell: Cell) -> list[MetaAction]:
    """Weighted A* over continuous poses reached through env.step, binned for deduplication."""
    goal = grid.center(goal_cell)
    field = grid.distance_field([goal_cell])
    tm = TimeModel()

    def h(pose: Pose) -> float:
        r, c = grid.cell_of(pose.xy)
        return 1.5 * field[r, c] / MOVE_STEP * tm.move_ahead_s

    def key(pose: Pose):
        return (round(pose.x / LATTICE_BIN), round(pose.y / LATTICE_BIN), pose.heading)

    # nodes: id -> (parent id, action); chains stay exact even when bins are re-entered
    nodes: list[tuple[int, MetaAction | None]] = [(-1, None)]
    heap = [(h(start), 0.0, 0, start)]
    seen_g = {key(start): 0.0}
    expansions = 0
    while heap:
        _, g, nid, pose = heapq.heappop(heap)
        if g > seen_g.get(key(pose), math.inf):
            continue
        if _dist(pose.xy, goal) <= ARRIVE_RADIUS:
            out = []
            while nid > 0:
                nid, act = nodes[nid]
                out.append(act)
            return out[::-1]
        expansions += 1
        if expansions > LATTICE_MAX_EXPANSIONS:
            break
        for act in (MetaAction.MOVE_AHEAD, MetaAction.ROTATE_LEFT, MetaAction.ROTATE_RIGHT):
            nxt, events = step(grid, pose, act)
            if events:
                continue
            if math.isinf(field[grid.cell_of(nxt.xy)]):
                continue
            ng = g + tm.cost(act)
            nk = key(nxt)
            if ng < seen_g.get(nk, math.inf):
                seen_g[nk] = ng
                nodes.append((nid, act))
                heapq.heappush(heap, (ng + h(nxt), ng, len(nodes) - 1, nxt))
    raise CompileError(f"no executable action sequence from {start} to {goal_cell}")


def replay(grid: GridMap, start: Pose, actions: Sequence[MetaAction]) -> tuple[list[Pose], bool]:
    """Poses visited (including start) and whether any collision occurred."""
    poses = [start]
    collided = False
    pose = start
    for a in actions:
        pose, events = step(grid, pose, a)
        collided |= Event.COLLISION in events
        poses.append(pose)
    return poses, collided


def path_to_actions(
    path: CellPath,
    start_heading: int = 0,
    grid: GridMap | None = None,
    start: Pose | None = None,
) -> list[MetaAction]:
    """Compile a cell path into MoveAhead/Rotate actions.

    At every step the agent re-aims at a lookahead point on the path with the
    fewest 30-degree turns that bring it within 15 degrees of the bearing
    (exact reversals turn left), then moves 0.25 m. With ``grid`` given the
    result is replayed through :func:`step`; blocked headings fall back to the
    nearest collision-free one, and a pose-lattice search takes over if the
    path cannot be tracked.
    """
    if not path.cells:
        raise CompileError("empty path")
    res = path.resolution
    centers = [((c + 0.5) * res, (r + 0.5) * res) for r, c in path.cells]
    if start is None:
        start = Pose(centers[0][0], centers[0][1], start_heading)
    try:
        actions = _carrot_compile(centers, start, grid)
    except CompileError:
        if grid is None:
            raise
        actions = None
    if grid is not None:
        if actions is not None and not _valid(grid, start, actions, centers[-1]):
            actions = None
        if actions is None:
            actions = _lattice_compile(grid, start, path.cells[-1])
            if not _valid(grid, start, actions, centers[-1]):
                raise CompileError("lattice compile produced an invalid sequence")
    return actions


def _valid(grid: GridMap, start: Pose, actions, goal: Point) -> bool:
    poses, collided = replay(grid, start, actions)
    return not collided and _dist(poses[-1].xy, goal) <= MOVE_STEP


def plan_actions(grid: GridMap, start: Pose, target: Point) -> list[MetaAction]:
    """A* from the start pose to a target compiled into actions (without End)."""
    return path_to_actions(astar(grid, start.xy, target), start.heading, grid, start)


def nearest_target(grid: GridMap, p: Point, targets: Sequence[Point] | None = None) -> Point:
    targets = grid.targets if targets is None else targets
    cell = grid.cell_of(p)
    best = None
    for i, t in enumerate(targets):
        d = grid.distance_field([grid.cell_of(t)])[cell]
        if math.isfinite(d) and (best is None or d < best[0]):
            best = (d, i)
    if best is None:
        raise NoPath(f"no target reachable from {p}")
    return targets[best[1]]


def optimal_time(
    grid: GridMap,
    start: Pose,
    targets: Sequence[Point] | None = None,
    tm: TimeModel = TimeModel(),
) -> float:
    """Minimum over targets of the compiled path's physical time plus one Stop."""
    targets = grid.targets if targets is None else targets
    best = math.inf
    for t in targets:
        try:
            acts = plan_actions(grid, start, t)
        except (NoPath, CompileError):
            continue
        best = min(best, actions_time(acts, tm) + tm.stop_s)
    if math.isinf(best):
        raise NoPath("every target is unreachable")
    return best
