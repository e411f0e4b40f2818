"""Exploration-waypoint scoring and exploration trajectory construction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import GridMap, MetaAction, Point, Pose, geodesic_distance
from .errors import CompileError, DegenerateGeometry, InsufficientCandidates, NoPath
from .planner import astar, path_to_actions, replay

LAMBDA = 0.7
NMS_RADIUS = 1.0


@dataclass(frozen=True)
class ScoredPoint:
    point: Point
    spaciousness: float
    closeness: float
    score: float


@dataclass(frozen=True)
class Trajectory:
    """An action sequence with the poses it visits (``poses[i]`` precedes ``actions[i]``)."""

    map_name: str
    start: Pose
    actions: tuple[MetaAction, ...]
    poses: tuple[Pose, ...]
    goal: Point
    waypoints: tuple[Point, ...] = ()
    flags: tuple[str, ...] = ()

    def __len__(self):
        return len(self.actions)

    @property
    def final_pose(self) -> Pose:
        return self.poses[-1]


def _closeness_scale(grid: GridMap, p_init: Point) -> float:
    g = np.asarray(grid.targets)
    return float(np.sqrt(((g - np.asarray(p_init)) ** 2).sum(axis=1)).max())


def score_points(grid: GridMap, points: np.ndarray, p_init: Point, p_target: Point, lam: float = LAMBDA):
    """Vectorised score terms for an ``(n, 2)`` array of points.

    Returns ``(spaciousness, closeness, score)`` arrays.
    """
    u = grid.boundary_points
    if len(u) == 0:
        raise DegenerateGeometry("obstacle-boundary set is empty")
    scale = _closeness_scale(grid, p_init)
    if scale == 0:
        raise DegenerateGeometry("every target coincides with the start")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    lo = np.empty(len(points))
    hi = np.empty(len(points))
    chunk = max(1, 2_000_000 // max(len(u), 1))
    for i in range(0, len(points), chunk):
        blk = points[i:i + chunk]
        dx = blk[:, 0:1] - u[None, :, 0]
        dy = blk[:, 1:2] - u[None, :, 1]
        d = np.sqrt(dx * dx + dy * dy)
        lo[i:i + chunk] = d.min(axis=1)
        hi[i:i + chunk] = d.max(axis=1)
    if (hi == 0).any():
        raise DegenerateGeometry("all boundary points coincide with a candidate")
    tx = points[:, 0] - p_target[0]
    ty = points[:, 1] - p_target[1]
    spacious = lo / hi
    close = 1.0 - np.sqrt(tx * tx + ty * ty) / scale
    return spacious, close, spacious + lam * close


def score(grid: GridMap, p: Point, p_init: Point, p_target: Point, lam: float = LAMBDA) -> ScoredPoint:
    s, c, total = score_points(grid, np.array([p]), p_init, p_target, lam)
    return ScoredPoint((float(p[0]), float(p[1])), float(s[0]), float(c[0]), float(total[0]))


def reachable_cells(grid: GridMap, p_init: Point) -> list:
    field = grid.distance_field([grid.cell_of(p_init)])
    return [(int(r), int(c)) for r, c in zip(*np.nonzero(np.isfinite(field)))]


@dataclass(frozen=True)
class WaypointSelection:
    first: ScoredPoint
    second: ScoredPoint
    suppression_fallback: bool = False


def select_waypoints(
    grid: GridMap,
    p_init: Point,
    p_target: Point,
    lam: float = LAMBDA,
    nms_radius: float = NMS_RADIUS,
) -> WaypointSelection:
    cells = reachable_cells(grid, p_init)  # row-major, so argmax ties go to the lower (row, col)
    if len(cells) < 2:
        raise InsufficientCandidates("fewer than two reachable cells")
    pts = np.array([grid.center(c) for c in cells])
    spacious, close, total = score_points(grid, pts, p_init, p_target, lam)

    def pick(i):
        return ScoredPoint((float(pts[i, 0]), float(pts[i, 1])), float(spacious[i]), float(close[i]), float(total[i]))

    i1 = int(np.argmax(total))
    far = np.sqrt(((pts - pts[i1]) ** 2).sum(axis=1)) > nms_radius
    fallback = not far.any()
    if fallback:
        mask = np.ones(len(pts), dtype=bool)
        mask[i1] = False
    else:
        mask = far
    masked = np.where(mask, total, -np.inf)
    i2 = int(np.argmax(masked))
    return WaypointSelection(pick(i1), pick(i2), fallback)


def top2(grid: GridMap, p_init: Point, p_target: Point, lam: float = LAMBDA, nms_radius: float = NMS_RADIUS):
    sel = select_waypoints(grid, p_init, p_target, lam, nms_radius)
    return sel.first.point, sel.second.point


def _compile_legs(grid: GridMap, start: Pose, stops: list) -> list[MetaAction]:
    actions: list[MetaAction] = []
    pose = start
    for stop in stops:
        leg = path_to_actions(astar(grid, pose.xy, stop), pose.heading, grid, pose)
        actions += leg
        poses, _ = replay(grid, pose, leg)
        pose = poses[-1]
    return actions


def build_exploration_trajectory(
    grid: GridMap,
    p_init: Point | Pose,
    p_target: Point,
    start_heading: int = 0,
    lam: float = LAMBDA,
    nms_radius: float = NMS_RADIUS,
) -> Trajectory:
    """Route start -> waypoint -> waypoint -> target, visiting the two top-scoring
    waypoints in whichever order gives the shorter total geodesic length."""
    start = p_init if isinstance(p_init, Pose) else Pose(p_init[0], p_init[1], start_heading)
    flags: list[str] = []
    try:
        sel = select_waypoints(grid, start.xy, p_target, lam, nms_radius)
        p1, p2 = sel.first.point, sel.second.point
        if sel.suppression_fallback:
            flags.append("SuppressionFallback")
        order = _leg_order(grid, start.xy, p1, p2, p_target)
    except InsufficientCandidates:
        flags.append("SingleWaypoint")
        order = []
    except NoPath:
        flags.append("DirectFallback")
        order = []

    try:
        actions = _compile_legs(grid, start, order + [p_target])
        waypoints = tuple(order)
    except (NoPath, CompileError):
        flags.append("DirectFallback")
        actions = _compile_legs(grid, start, [p_target])
        waypoints = ()
    actions.append(MetaAction.END)
    poses, _ = replay(grid, start, actions)
    return Trajectory(grid.name, start, tuple(actions), tuple(poses), tuple(p_target), waypoints, tuple(flags))


def _leg_order(grid, p_init, p1, p2, p_target) -> list:
    def total(a, b):
        legs = [(p_init, a), (a, b), (b, p_target)]
        return sum(geodesic_distance(grid, x, y) for x, y in legs)

    first, second = total(p1, p2), total(p2, p1)
    if math.isinf(first) and math.isinf(second):
        raise NoPath("waypoints unreachable")
    return [p1, p2] if first <= second else [p2, p1]


def route_length(grid: GridMap, start: Point, stops) -> float:
    """Sum of geodesic leg lengths along ``start -> stops...``."""
    pts = [start, *stops]
    return sum(geodesic_distance(grid, a, b) for a, b in zip(pts, pts[1:]))
