"""Seeded random occupancy maps with a verified start and reachable targets."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .env import GridMap, Pose
from .errors import CompileError, GenerationExhausted, NoPath
from .planner import plan_actions

MAX_DENSITY = 0.5


def _place_obstacles(rng: np.random.Generator, h: int, w: int, density: float) -> np.ndarray:
    occ = np.zeros((h, w), dtype=bool)
    target = density * h * w
    span = max(2, min(h, w) // 5)
    guard = 0
    while occ.sum() < target and guard < 10 * h * w:
        guard += 1
        if rng.random() < 0.6:
            bh, bw = int(rng.integers(1, span + 1)), int(rng.integers(1, span + 1))
        elif rng.random() < 0.5:
            bh, bw = 1, int(rng.integers(3, max(4, w // 2)))
        else:
            bh, bw = int(rng.integers(3, max(4, h // 2))), 1
        bh, bw = min(bh, h), min(bw, w)
        r, c = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        occ[r:r + bh, c:c + bw] = True
    return occ


def generate_map(
    height: int,
    width: int,
    density: float,
    seed: int,
    n_targets: int = 1,
    resolution: float = 0.25,
    name: str | None = None,
    max_retries: int = 50,
    min_separation: float = 1.5,
) -> GridMap:
    """Random blocks and thin walls; start and targets share one free component
    and every target has an executable plan from the start (heading 0)."""
    if not 0.0 <= density <= MAX_DENSITY:
        raise ValueError(f"density must lie in [0, {MAX_DENSITY}], got {density}")
    if height < 3 or width < 3:
        raise ValueError("maps must be at least 3x3")
    if n_targets < 1:
        raise ValueError("need at least one target")
    name = name or f"gen_{height}x{width}_{seed}"
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        occ = _place_obstacles(rng, height, width, density)
        labels, n = ndimage.label(~occ, structure=np.ones((3, 3), dtype=int))
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        comp = np.argwhere(labels == int(np.argmax(sizes)) + 1)
        if len(comp) < n_targets + 2:
            continue
        pick = rng.permutation(len(comp))
        start_cell = tuple(int(v) for v in comp[pick[0]])
        targets = []
        for j in pick[1:]:
            cell = tuple(int(v) for v in comp[j])
            if np.hypot(cell[0] - start_cell[0], cell[1] - start_cell[1]) * resolution >= min_separation:
                targets.append(cell)
            if len(targets) == n_targets:
                break
        if len(targets) < n_targets:
            continue
        targets.sort()  # row-major, as load_map reads them back

        def center(cell):
            return ((cell[1] + 0.5) * resolution, (cell[0] + 0.5) * resolution)

        grid = GridMap(occ, resolution, tuple(center(t) for t in targets), (center(start_cell),), name)
        start = Pose(*grid.starts[0], 0)
        try:
            for t in grid.targets:
                plan_actions(grid, start, t)
        except (NoPath, CompileError):
            continue
        return grid
    raise GenerationExhausted(f"no valid {height}x{width} map at density {density} after {max_retries} attempts (seed {seed})")


def generate_suite(count: int, height: int, width: int, density: float, seed: int, **kwargs) -> list[GridMap]:
    return [
        generate_map(height, width, density, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                     name=f"map_{seed}_{i:03d}", **kwargs)
        for i in range(count)
    ]
