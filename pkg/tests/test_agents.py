import numpy as np
import pytest

from dualnav.agents import (
    GreedyPolicy,
    OraclePolicy,
    OracleReasoner,
    StubReasoner,
    StuckPolicy,
    compose_reasoning,
    make_policy,
    make_reasoner,
    token_count,
)
from dualnav.controller import Outcome, run_episode
from dualnav.env import GridMap, MetaAction, Pose
from dualnav.mapgen import generate_suite
from dualnav.synth import StagnationConfig, detect_repetitive

from _support import grid_from_rows, open_rows, wall_map


@pytest.mark.parametrize("n", [1, 5, 150, 400])
def test_compose_reasoning_exact_token_count(n):
    text = compose_reasoning((1.0, 2.0), 3, 45.0, n)
    assert token_count(text) == n


def test_stub_reasoner_emits_150_tokens():
    text = compose_reasoning((1.0, 2.0), 3, 45.0)
    assert token_count(text) == 150
    assert text.startswith("<think_start>") and text.endswith("<think_end>")


def test_oracle_policy_succeeds_on_generated_maps():
    for grid in generate_suite(8, 20, 20, 0.2, seed=31):
        start = Pose(*grid.starts[0], 0)
        ep = run_episode(grid, start, grid.targets[0], OraclePolicy(), StubReasoner())
        assert ep.outcome is Outcome.SUCCESS


def test_greedy_without_noise_succeeds_on_convex_maps():
    rng = np.random.default_rng(12)
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(6, 25, size=2))
        tr, tc = int(rng.integers(h)), int(rng.integers(w))
        sr, sc = int(rng.integers(h)), int(rng.integers(w))
        grid = GridMap(np.zeros((h, w), dtype=bool), 0.25, (((tc + 0.5) * 0.25, (tr + 0.5) * 0.25),))
        start = Pose((sc + 0.5) * 0.25, (sr + 0.5) * 0.25, 30 * int(rng.integers(12)))
        ep = run_episode(grid, start, grid.targets[0], GreedyPolicy(), StubReasoner())
        assert ep.outcome is Outcome.SUCCESS


@pytest.mark.parametrize("pattern", ["pace", "spin", "wall"])
def test_stuck_policy_is_repetitive_within_40_steps(pattern):
    grid = wall_map()
    ep = run_episode(grid, Pose(0.625, 0.625, 180), grid.targets[0], StuckPolicy(pattern), StubReasoner())
    trace = ep.positions
    assert any(detect_repetitive(trace, t, StagnationConfig()) for t in range(min(40, len(trace))))


def test_greedy_noise_is_seeded():
    grid = wall_map()

    def go(seed):
        return run_episode(grid, Pose(0.625, 0.625, 0), grid.targets[0], GreedyPolicy(0.5), StubReasoner(), seed=seed).actions

    assert go(4) == go(4)
    assert go(4) != go(5)


def test_oracle_reasoner_hands_over_plan():
    grid = grid_from_rows(open_rows(6, 6, targets=[(2, 5)]))
    start = Pose(*grid.center((2, 1)), 0)
    ep = run_episode(grid, start, grid.targets[0], StuckPolicy("spin"), OracleReasoner())
    assert ep.outcome is Outcome.SUCCESS
    assert ep.actions == [MetaAction.MOVE_AHEAD] * 4 + [MetaAction.END]


def test_oracle_reasoner_horizon_limits_plan():
    grid = grid_from_rows(open_rows(6, 12, targets=[(2, 11)]))
    start = Pose(*grid.center((2, 0)), 0)
    ep = run_episode(grid, start, grid.targets[0], StuckPolicy("spin"), OracleReasoner(horizon=3))
    assert ep.actions[:4] == [MetaAction.MOVE_AHEAD] * 3 + [MetaAction.ROTATE_LEFT]


def test_factories():
    assert isinstance(make_policy("greedy", noise=0.1), GreedyPolicy)
    assert isinstance(make_reasoner("oracle", horizon=4), OracleReasoner)
    with pytest.raises(ValueError):
        make_policy("telepathic")
    with pytest.raises(ValueError):
        make_reasoner("oracle2")
    with pytest.raises(ValueError):
        GreedyPolicy(noise=1.5)
    with pytest.raises(ValueError):
        StuckPolicy("hop")
