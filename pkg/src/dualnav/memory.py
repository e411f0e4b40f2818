"""Landmark memory: nodes joined by action edges, uniform pruning, text form."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

from .env import MetaAction, Observation, PanoramicScan, Pose

DEFAULT_MAX_LANDMARKS = 10
IMAGE = "<image>"

ScanSource = Union[PanoramicScan, Callable[[], PanoramicScan], None]


@dataclass(frozen=True, eq=False)
class Landmark:
    id: int
    pose: Pose
    step_index: int
    source: ScanSource = field(default=None, repr=False)

    @property
    def scan(self) -> PanoramicScan | None:
        # scans are deterministic in (map, pose), so they may be rendered on first use
        if callable(self.source):
            object.__setattr__(self, "source", self.source())
        return self.source

    def __eq__(self, other):
        if not isinstance(other, Landmark):
            return NotImplemented
        return (self.id, self.pose, self.step_index) == (other.id, other.pose, other.step_index)

    def __hash__(self):
        return hash((self.id, self.pose, self.step_index))


def keep_indices(n: int, limit: int) -> list[int]:
    """Evenly spaced indices ``round(i * (n-1) / (limit-1))``, halves rounded up."""
    if n <= limit:
        return list(range(n))
    if limit == 1:
        return [n - 1]
    den = limit - 1
    picked = [(2 * i * (n - 1) + den) // (2 * den) for i in range(limit)]
    return sorted(set(picked))


@dataclass(frozen=True)
class MemoryGraph:
    landmarks: tuple[Landmark, ...] = ()
    edges: tuple[tuple[MetaAction, ...], ...] = ()
    max_landmarks: int = DEFAULT_MAX_LANDMARKS

    def __post_init__(self):
        if self.max_landmarks < 1:
            raise ValueError("max_landmarks must be positive")
        if len(self.edges) != max(len(self.landmarks) - 1, 0):
            raise ValueError("edge count must be one less than landmark count")
        for edge in self.edges:
            if any(not MetaAction(a).is_locomotion for a in edge):
                raise ValueError("action edges may only hold locomotion actions")

    def __len__(self):
        return len(self.landmarks)

    @property
    def action_count(self) -> int:
        return sum(len(e) for e in self.edges)

    def append(self, pose: Pose, step_index: int, actions_since_last: Sequence = (), scan: ScanSource = None) -> "MemoryGraph":
        actions = tuple(MetaAction(a) for a in actions_since_last)
        if self.landmarks and step_index <= self.landmarks[-1].step_index:
            raise ValueError("landmark step indices must increase")
        next_id = self.landmarks[-1].id + 1 if self.landmarks else 0
        lm = Landmark(next_id, pose, step_index, scan)
        edges = self.edges + (actions,) if self.landmarks else ()
        return MemoryGraph(self.landmarks + (lm,), edges, self.max_landmarks).pruned()

    def pruned(self) -> "MemoryGraph":
        n = len(self.landmarks)
        if n <= self.max_landmarks:
            return self
        keep = keep_indices(n, self.max_landmarks)
        edges = []
        for a, b in zip(keep, keep[1:]):
            merged: tuple = ()
            for k in range(a, b):
                merged += self.edges[k]
            edges.append(merged)
        return MemoryGraph(tuple(self.landmarks[i] for i in keep), tuple(edges), self.max_landmarks)

    def serialize(self, current_view: Observation | None = None) -> str:
        return serialize(self, current_view)


def append_landmark(mem: MemoryGraph, scan: ScanSource, pose: Pose, actions_since_last: Sequence, step_index: int | None = None) -> MemoryGraph:
    if step_index is None:
        step_index = mem.landmarks[-1].step_index + 1 if mem.landmarks else 0
    return mem.append(pose, step_index, actions_since_last, scan)


def prune(mem: MemoryGraph) -> MemoryGraph:
    return mem.pruned()


def serialize(mem: MemoryGraph, current_view: Observation | None = None) -> str:
    parts = []
    for k, _ in enumerate(mem.landmarks, start=1):
        parts.append(f"At landmark{k}, you see {IMAGE * 4}; ")
        if k <= len(mem.edges):
            acts = ", ".join(MetaAction(a).text for a in mem.edges[k - 1])
            parts.append(f"Executed {acts} from landmark {k} to landmark {k + 1}; ")
    parts.append(f"Your current view is {IMAGE}.")
    return "".join(parts)


_LANDMARK_RE = re.compile(r"At landmark(\d+), you see (?:<image>){4}; ")
_EDGE_RE = re.compile(r"Executed (.*?) from landmark (\d+) to landmark (\d+); ")
_TAIL = f"Your current view is {IMAGE}."


def parse_memory(text: str) -> tuple[int, list[list[MetaAction]]]:
    """Inverse of :func:`serialize`: landmark count and edge action lists."""
    pos, count, edges = 0, 0, []
    while not text.startswith(_TAIL, pos):
        m = _LANDMARK_RE.match(text, pos)
        if m:
            count += 1
            if int(m.group(1)) != count:
                raise ValueError(f"landmark numbering broken at {m.group(1)}")
            pos = m.end()
            continue
        m = _EDGE_RE.match(text, pos)
        if not m:
            raise ValueError(f"unparseable memory text at offset {pos}")
        body = m.group(1)
        edges.append([MetaAction.from_text(t) for t in body.split(", ")] if body else [])
        pos = m.end()
    if text[pos:] != _TAIL:
        raise ValueError("memory text has trailing content")
    return count, edges
