"""Deterministic 2D occupancy-grid world.

Coordinates are metric. Cell ``(row, col)`` covers
``x in [col*res, (col+1)*res)`` and ``y in [row*res, (row+1)*res)``, so the
y axis grows with the row index of the map file. Headings are integer
degrees, 0 along +x and counterclockwise positive.
"""
from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import OutOfBounds, ParseError, ValidationError

MOVE_STEP = 0.25
TURN_STEP = 30
FOV_DEG = 90.0
VIEW_RANGE = 5.0
SQRT2 = math.sqrt(2.0)

# 8-neighbourhood, orthogonal moves first
NEIGHBOURS = (
    (0, 1, False), (1, 0, False), (0, -1, False), (-1, 0, False),
    (1, 1, True), (1, -1, True), (-1, 1, True), (-1, -1, True),
)

Cell = tuple[int, int]
Point = tuple[float, float]


class MetaAction(str, enum.Enum):
    MOVE_AHEAD = "MoveAhead"
    ROTATE_LEFT = "RotateLeft"
    ROTATE_RIGHT = "RotateRight"
    OBS = "Obs"
    END = "End"

    @property
    def text(self) -> str:
        """Spelling used in serialized memory and conversation turns."""
        return _ACTION_TEXT[self]

    @property
    def is_locomotion(self) -> bool:
        return self in (MetaAction.MOVE_AHEAD, MetaAction.ROTATE_LEFT, MetaAction.ROTATE_RIGHT)

    @classmethod
    def from_text(cls, text: str) -> "MetaAction":
        try:
            return _TEXT_ACTION[text]
        except KeyError:
            return cls(text)


_ACTION_TEXT = {
    MetaAction.MOVE_AHEAD: "MoveAhead 0.25",
    MetaAction.ROTATE_LEFT: "RotateLeft 30.0",
    MetaAction.ROTATE_RIGHT: "RotateRight 30.0",
    MetaAction.OBS: "obs",
    MetaAction.END: "end",
}
_TEXT_ACTION = {v: k for k, v in _ACTION_TEXT.items()}


class Event(str, enum.Enum):
    COLLISION = "Collision"
    OBS_REQUESTED = "ObsRequested"
    TERMINATED = "Terminated"


def _clean(v: float) -> float:
    # strips float noise from trig and avoids -0.0 in logs
    return round(v, 9) + 0.0


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int = 0

    def __post_init__(self):
        if self.heading % TURN_STEP != 0 or not 0 <= self.heading < 360:
            raise ValidationError(f"heading {self.heading} is not a multiple of 30 in [0, 330]")

    @property
    def xy(self) -> Point:
        return (self.x, self.y)

    def rotated(self, degrees: int) -> "Pose":
        return Pose(self.x, self.y, (self.heading + degrees) % 360)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(float(d["x"]), float(d["y"]), int(d["heading"]))


@dataclass(frozen=True, eq=False)
class GridMap:
    """Immutable occupancy grid with its target set.

    ``occupancy`` has shape ``(height, width)``; ``True`` marks an obstacle.
    """

    occupancy: np.ndarray
    resolution: float = 0.1
    targets: tuple[Point, ...] = ()
    starts: tuple[Point, ...] = ()
    name: str = "map"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        occ = np.array(self.occupancy, dtype=bool)
        if occ.ndim != 2:
            raise ValidationError("occupancy must be a 2D grid")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "targets", tuple((float(x), float(y)) for x, y in self.targets))
        object.__setattr__(self, "starts", tuple((float(x), float(y)) for x, y in self.starts))
        if not self.resolution > 0:
            raise ValidationError("resolution must be positive")
        if self.width < 3 or self.height < 3:
            raise ValidationError("grid must be at least 3x3")
        if occ.all():
            raise ValidationError("grid has no free cells")
        if not self.targets:
            raise ValidationError("grid has no target")
        for label, pts in (("target", self.targets), ("start", self.starts)):
            for p in pts:
                if not self.in_bounds(p):
                    raise ValidationError(f"{label} {p} outside the map")
                if not self.is_free(p):
                    raise ValidationError(f"{label} {p} lies on an obstacle")

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def extent(self) -> Point:
        return (self.width * self.resolution, self.height * self.resolution)

    def cell_of(self, p: Point) -> Cell:
        return (math.floor(p[1] / self.resolution), math.floor(p[0] / self.resolution))

    def center(self, cell: Cell) -> Point:
        r, c = cell
        return ((c + 0.5) * self.resolution, (r + 0.5) * self.resolution)

    def in_bounds(self, p: Point) -> bool:
        r, c = self.cell_of(p)
        return 0 <= r < self.height and 0 <= c < self.width

    def cell_free(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width and not self.occupancy[r, c]

    def is_free(self, p: Point) -> bool:
        return self.cell_free(self.cell_of(p))

    def neighbours(self, cell: Cell) -> Iterable[tuple[Cell, bool]]:
        """Free 8-neighbours; diagonal steps need both orthogonal cells free."""
        r, c = cell
        for dr, dc, diag in NEIGHBOURS:
            nxt = (r + dr, c + dc)
            if not self.cell_free(nxt):
                continue
            if diag and not (self.cell_free((r + dr, c)) and self.cell_free((r, c + dc))):
                continue
            yield nxt, diag

    @cached_property
    def boundary_cells(self) -> tuple[Cell, ...]:
        """Free cells 4-adjacent to an obstacle or to the map edge, row-major."""
        occ = np.pad(self.occupancy, 1, constant_values=True)
        near = occ[:-2, 1:-1] | occ[2:, 1:-1] | occ[1:-1, :-2] | occ[1:-1, 2:]
        mask = near & ~self.occupancy
        return tuple((int(r), int(c)) for r, c in zip(*np.nonzero(mask)))

    @cached_property
    def boundary_points(self) -> np.ndarray:
        cells = np.array(self.boundary_cells, dtype=float).reshape(-1, 2)
        return np.column_stack(((cells[:, 1] + 0.5) * self.resolution, (cells[:, 0] + 0.5) * self.resolution))

    @cached_property
    def target_field(self) -> np.ndarray:
        """Geodesic distance (meters) from every cell to the nearest target."""
        return self.distance_field([self.cell_of(t) for t in self.targets])

    def distance_field(self, sources: Sequence[Cell]) -> np.ndarray:
        key = tuple(sorted(set(sources)))
        hit = self._cache.get(key)
        if hit is None:
            hit = _dijkstra_field(self, key) * self.resolution
            hit.setflags(write=False)
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def distance_to_targets(self, p: Point) -> float:
        r, c = self.cell_of(p)
        return float(self.target_field[r, c])


def _dijkstra_field(grid: GridMap, sources: Sequence[Cell]) -> np.ndarray:
    # integer (straight, diagonal) counts so equal geodesics give bit-equal floats
    dist = np.full((grid.height, grid.width), np.inf)
    heap = []
    for s in sources:
        if grid.cell_free(s):
            dist[s] = 0.0
            heap.append((0.0, 0, 0, s))
    heapq.heapify(heap)
    while heap:
        d, ns, nd_, cell = heapq.heappop(heap)
        if d > dist[cell]:
            continue
        for nxt, diag in grid.neighbours(cell):
            a, b = (ns, nd_ + 1) if diag else (ns + 1, nd_)
            val = a + b * SQRT2
            if val < dist[nxt]:
                dist[nxt] = val
                heapq.heappush(heap, (val, a, b, nxt))
    return dist


# -- map files -------------------------------------------------------------

def load_map(text: str, name: str = "map") -> GridMap:
    """Parse the ASCII map format (``resolution <m>`` header, then grid rows)."""
    lines = [ln.rstrip("\r") for ln in text.splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ParseError("empty map file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "resolution":
        raise ParseError("first line must be 'resolution <meters>'")
    try:
        res = float(head[1])
    except ValueError:
        raise ParseError(f"bad resolution {head[1]!r}") from None
    rows = lines[1:]
    if not rows:
        raise ParseError("map has no grid rows")
    width = len(rows[0])
    occ = np.zeros((len(rows), width), dtype=bool)
    targets, starts = [], []
    for r, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"row {r} has length {len(row)}, expected {width}")
        for c, ch in enumerate(row):
            if ch == "#":
                occ[r, c] = True
            elif ch == "T":
                targets.append(((c + 0.5) * res, (r + 0.5) * res))
            elif ch == "S":
                starts.append(((c + 0.5) * res, (r + 0.5) * res))
            elif ch != ".":
                raise ParseError(f"unknown cell character {ch!r} at row {r}, column {c}")
    return GridMap(occ, res, tuple(targets), tuple(starts), name)


def dump_map(grid: GridMap) -> str:
    chars = np.where(grid.occupancy, "#", ".").astype("<U1")
    for p in grid.starts:
        chars[grid.cell_of(p)] = "S"
    for p in grid.targets:
        chars[grid.cell_of(p)] = "T"
    body = "\n".join("".join(row) for row in chars)
    return f"resolution {grid.resolution!r}\n{body}\n"


# -- kinematics ------------------------------------------------------------

def heading_vector(heading: int) -> Point:
    rad = math.radians(heading)
    return (math.cos(rad), math.sin(rad))


def step(grid: GridMap, pose: Pose, action) -> tuple[Pose, list[Event]]:
    action = MetaAction(action)
    if action is MetaAction.ROTATE_LEFT:
        return pose.rotated(TURN_STEP), []
    if action is MetaAction.ROTATE_RIGHT:
        return pose.rotated(-TURN_STEP), []
    if action is MetaAction.OBS:
        return pose, [Event.OBS_REQUESTED]
    if action is MetaAction.END:
        return pose, [Event.TERMINATED]

    ux, uy = heading_vector(pose.heading)
    dx, dy = MOVE_STEP * ux, MOVE_STEP * uy
    n = math.ceil(MOVE_STEP / (grid.resolution / 4))
    for i in range(1, n + 1):
        f = i / n
        if not grid.is_free((pose.x + dx * f, pose.y + dy * f)):
            return pose, [Event.COLLISION]
    moved = Pose(_clean(pose.x + dx), _clean(pose.y + dy), pose.heading)
    if not grid.is_free(moved.xy):
        return pose, [Event.COLLISION]
    return moved, []


def geodesic_distance(grid: GridMap, p: Point, q: Point) -> float:
    """Shortest 8-connected path length in meters between the cells of p and q."""
    for pt in (p, q):
        if not grid.in_bounds(pt):
            raise OutOfBounds(f"{pt} outside the map")
    pc, qc = grid.cell_of(p), grid.cell_of(q)
    if pc == qc:
        return 0.0
    if not (grid.cell_free(pc) and grid.cell_free(qc)):
        return math.inf
    return float(grid.distance_field([qc])[pc])


# -- observations ----------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    origin: Pose
    visible_cells: frozenset
    visible_targets: tuple[Point, ...]


@dataclass(frozen=True)
class PanoramicScan:
    views: tuple[Observation, ...]

    @property
    def headings(self) -> tuple[int, ...]:
        return tuple(v.origin.heading for v in self.views)


def angle_diff(a: float, b: float) -> float:
    """Signed difference a - b wrapped to (-180, 180]."""
    d = (a - b) % 360.0
    return d - 360.0 if d > 180.0 else d


def observe(grid: GridMap, pose: Pose, view_range: float = VIEW_RANGE, fov: float = FOV_DEG) -> Observation:
    res = grid.resolution
    own = grid.cell_of(pose.xy)
    reach = int(math.ceil(view_range / res)) + 1
    r0, c0 = own
    rows = np.arange(max(0, r0 - reach), min(grid.height, r0 + reach + 1))
    cols = np.arange(max(0, c0 - reach), min(grid.width, c0 + reach + 1))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    dx = (cc + 0.5) * res - pose.x
    dy = (rr + 0.5) * res - pose.y
    dist = np.sqrt(dx * dx + dy * dy)
    bearing = np.degrees(np.arctan2(dy, dx))
    off = (bearing - pose.heading + 180.0) % 360.0 - 180.0
    keep = (dist <= view_range + 1e-9) & (np.abs(off) <= fov / 2 + 1e-9)
    keep &= ~((rr == r0) & (cc == c0))
    rr, cc, dx, dy, dist = rr[keep], cc[keep], dx[keep], dy[keep], dist[keep]

    spacing = res / 4
    k = np.arange(1, int(math.ceil(view_range / spacing)) + 1) * spacing
    safe = np.where(dist > 0, dist, 1.0)
    sx = pose.x + np.outer(dx / safe, k)
    sy = pose.y + np.outer(dy / safe, k)
    before = k[None, :] < dist[:, None]
    sr = np.floor(sy / res).astype(int)
    sc = np.floor(sx / res).astype(int)
    inside = (sr >= 0) & (sr < grid.height) & (sc >= 0) & (sc < grid.width)
    blocked = np.zeros_like(before)
    blocked[inside] = grid.occupancy[sr[inside], sc[inside]]
    self_cell = (sr == rr[:, None]) & (sc == cc[:, None])
    occluded = (blocked & before & ~self_cell).any(axis=1)

    cells = {own}
    cells.update(zip(rr[~occluded].tolist(), cc[~occluded].tolist()))
    visible = frozenset(cells)
    seen = tuple(t for t in grid.targets if grid.cell_of(t) in visible)
    return Observation(pose, visible, seen)


def panoramic(grid: GridMap, pose: Pose, view_range: float = VIEW_RANGE) -> PanoramicScan:
    """Four views at 90 degree spacing; the caller's pose is left unchanged."""
    return PanoramicScan(tuple(observe(grid, pose.rotated(90 * i), view_range) for i in range(4)))
