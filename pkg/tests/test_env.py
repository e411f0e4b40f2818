import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualnav.env import (
    Event,
    GridMap,
    MetaAction,
    Pose,
    dump_map,
    geodesic_distance,
    load_map,
    observe,
    panoramic,
    step,
)
from dualnav.errors import OutOfBounds, ParseError, ValidationError

from _support import brute_boundary, dijkstra_meters, dijkstra_pairs, grid_from_rows, open_rows, random_grid


# -- load_map ---------------------------------------------------------------

def test_three_by_three_free_grid_has_eight_boundary_cells():
    grid = grid_from_rows(["...", ".T.", "..."], resolution=0.1)
    assert len(grid.boundary_cells) == 8
    assert (1, 1) not in grid.boundary_cells
    assert grid.targets == (pytest.approx((0.15, 0.15)),)


def test_ragged_rows_raise_parse_error():
    with pytest.raises(ParseError):
        load_map("resolution 0.1\n....\n...T\n..\n")


@pytest.mark.parametrize("text", [
    "",
    "....\n.T..\n....\n",
    "resolution abc\n...\n.T.\n...\n",
    "resolution 0.1\n...\n.X.\n...\n",
    "resolution 0.1\n",
])
def test_malformed_map_text_raises_parse_error(text):
    with pytest.raises(ParseError):
        load_map(text)


@pytest.mark.parametrize("rows", [
    ["###", "###", "###"],
    ["...", "...", "..."],
    ["..", ".T"],
])
def test_invalid_maps_raise_validation_error(rows):
    with pytest.raises(ValidationError):
        grid_from_rows(rows)


def test_zero_resolution_rejected():
    with pytest.raises(ValidationError):
        load_map("resolution 0\n...\n.T.\n...\n")


def test_boundary_matches_brute_force_on_random_maps():
    rng = np.random.default_rng(15)
    for _ in range(10):
        grid = random_grid(rng, 20, 20, 0.15)
        assert list(grid.boundary_cells) == brute_boundary(grid)


def test_dump_and_load_round_trip():
    rows = ["S..#", ".#..", "...T"]
    grid = grid_from_rows(rows, resolution=0.5, name="rt")
    again = load_map(dump_map(grid), "rt")
    assert dump_map(again) == dump_map(grid)
    assert again.starts == grid.starts and again.targets == grid.targets
    assert np.array_equal(again.occupancy, grid.occupancy)


def test_gridmap_is_immutable():
    grid = grid_from_rows(["...", ".T.", "..."])
    with pytest.raises(ValueError):
        grid.occupancy[0, 0] = True


# -- step ---------------------------------------------------------------------

@pytest.fixture
def open_grid():
    return grid_from_rows(open_rows(20, 20, targets=[(19, 19)]), resolution=0.1)


def test_rotate_left_changes_heading_only(open_grid):
    pose, events = step(open_grid, Pose(1.0, 1.0, 0), MetaAction.ROTATE_LEFT)
    assert pose == Pose(1.0, 1.0, 30) and events == []


def test_rotate_right_wraps(open_grid):
    pose, _ = step(open_grid, Pose(1.0, 1.0, 0), MetaAction.ROTATE_RIGHT)
    assert pose.heading == 330


def test_move_ahead_at_ninety_degrees(open_grid):
    pose, events = step(open_grid, Pose(1.0, 1.0, 90), MetaAction.MOVE_AHEAD)
    assert events == []
    assert pose.x == pytest.approx(1.0, abs=1e-9)
    assert pose.y == pytest.approx(1.25, abs=1e-9)
    assert pose.heading == 90


def test_move_ahead_diagonal_displacement(open_grid):
    pose, _ = step(open_grid, Pose(1.0, 1.0, 30), MetaAction.MOVE_AHEAD)
    assert pose.x == pytest.approx(1.0 + 0.25 * math.cos(math.radians(30)), abs=1e-9)
    assert pose.y == pytest.approx(1.0 + 0.25 * math.sin(math.radians(30)), abs=1e-9)


def test_blocked_move_is_noop_with_collision():
    rows = open_rows(10, 10, targets=[(9, 9)])
    rows = [r[:6] + "#" + r[7:] for r in rows]
    grid = grid_from_rows(rows, resolution=0.1)
    start = Pose(0.55, 0.35, 0)  # wall face at x = 0.6
    pose, events = step(grid, start, MetaAction.MOVE_AHEAD)
    assert pose == start
    assert events == [Event.COLLISION]


def test_thin_obstacle_inside_sweep_is_detected():
    rows = open_rows(10, 10, targets=[(9, 9)])
    rows = [r[:5] + "#" + r[6:] for r in rows]
    grid = grid_from_rows(rows, resolution=0.1)
    # the endpoint (0.65) is free, but the swept segment crosses column 5
    pose, events = step(grid, Pose(0.4, 0.35, 0), MetaAction.MOVE_AHEAD)
    assert events == [Event.COLLISION] and pose.x == 0.4


def test_leaving_the_map_is_a_collision(open_grid):
    pose, events = step(open_grid, Pose(1.95, 1.0, 0), MetaAction.MOVE_AHEAD)
    assert events == [Event.COLLISION] and pose.x == 1.95


def test_obs_and_end_events(open_grid):
    p = Pose(1.0, 1.0, 60)
    assert step(open_grid, p, MetaAction.OBS) == (p, [Event.OBS_REQUESTED])
    assert step(open_grid, p, MetaAction.END) == (p, [Event.TERMINATED])


def test_twelve_left_turns_return_the_pose_exactly(open_grid):
    pose = Pose(0.7, 1.3, 120)
    cur = pose
    for _ in range(12):
        cur, _ = step(open_grid, cur, MetaAction.ROTATE_LEFT)
    assert cur == pose


def test_step_is_pure(open_grid):
    p = Pose(1.0, 1.0, 210)
    assert step(open_grid, p, MetaAction.MOVE_AHEAD) == step(open_grid, p, MetaAction.MOVE_AHEAD)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), actions=st.lists(st.sampled_from(list(MetaAction)[:3]), min_size=1, max_size=60))
def test_move_never_enters_an_obstacle(seed, actions):
    grid = random_grid(np.random.default_rng(seed), 12, 12, 0.25, resolution=0.1)
    r, c = grid.cell_of(grid.targets[0])
    pose = Pose(*grid.center((r, c)), 0)
    for a in actions:
        pose, _ = step(grid, pose, a)
        assert grid.is_free(pose.xy)


def test_pose_rejects_off_lattice_heading():
    with pytest.raises(ValidationError):
        Pose(0.0, 0.0, 45)


def test_action_spellings():
    assert [a.text for a in MetaAction] == ["MoveAhead 0.25", "RotateLeft 30.0", "RotateRight 30.0", "obs", "end"]
    assert all(MetaAction.from_text(a.text) is a for a in MetaAction)


# -- geodesic distance -----------------------------------------------------------

def test_geodesic_same_point_is_zero(open_grid):
    assert geodesic_distance(open_grid, (1.0, 1.0), (1.0, 1.0)) == 0.0


def test_geodesic_straight_corridor():
    rows = ["#" * 14, "#" + "." * 12 + "T", "#" * 14]
    rows[1] = "#" + "." * 12 + "#"
    rows = ["#" * 14, rows[1], "#" * 14]
    rows[1] = rows[1][:12] + "T#"
    grid = grid_from_rows(rows, resolution=0.1)
    p, q = grid.center((1, 1)), grid.center((1, 11))
    assert geodesic_distance(grid, p, q) == pytest.approx(1.0, abs=1e-12)


def test_geodesic_disconnected_is_infinite():
    grid = grid_from_rows(["..#..", "..#.T", "..#.."])
    assert math.isinf(geodesic_distance(grid, grid.center((0, 0)), grid.center((0, 4))))


def test_geodesic_out_of_bounds(open_grid):
    with pytest.raises(OutOfBounds):
        geodesic_distance(open_grid, (-0.1, 0.5), (1.0, 1.0))


def test_geodesic_matches_dijkstra_and_is_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(5):
        grid = random_grid(rng, 15, 15, 0.2, resolution=0.1)
        cells = [tuple(map(int, c)) for c in np.argwhere(~grid.occupancy)]
        src = cells[int(rng.integers(len(cells)))]
        oracle = dijkstra_meters(grid, src)
        for _ in range(20):
            dst = cells[int(rng.integers(len(cells)))]
            got = geodesic_distance(grid, grid.center(src), grid.center(dst))
            want = oracle.get(dst, math.inf)
            assert got == pytest.approx(want, abs=1e-9) if math.isfinite(want) else math.isinf(got)
            back = geodesic_distance(grid, grid.center(dst), grid.center(src))
            assert back == pytest.approx(got, abs=1e-9) if math.isfinite(got) else math.isinf(back)


def test_geodesic_triangle_inequality():
    rng = np.random.default_rng(8)
    grid = random_grid(rng, 18, 18, 0.15, resolution=0.1)
    cells = [tuple(map(int, c)) for c in np.argwhere(~grid.occupancy)]
    for _ in range(100):
        a, b, c = (grid.center(cells[int(rng.integers(len(cells)))]) for _ in range(3))
        ab, bc, ac = geodesic_distance(grid, a, b), geodesic_distance(grid, b, c), geodesic_distance(grid, a, c)
        if math.isfinite(ab) and math.isfinite(bc):
            assert ac <= ab + bc + 1e-9


# -- observations ------------------------------------------------------------------

def test_closed_box_sees_only_its_own_cell():
    grid = grid_from_rows(["#####", "#.#T#", "#####"], resolution=0.1)
    obs = observe(grid, Pose(*grid.center((1, 1)), 0))
    assert obs.visible_cells <= {(1, 1), (1, 2), (0, 1), (2, 1), (0, 0), (0, 2), (2, 0), (2, 2), (1, 0)}
    assert (1, 1) in obs.visible_cells
    assert (1, 3) not in obs.visible_cells and obs.visible_targets == ()


def test_visible_cells_respect_range_and_fov():
    grid = GridMap(np.zeros((20, 20), dtype=bool), 0.5, ((9.75, 9.75),))
    for heading in (0, 30, 150, 270):
        pose = Pose(5.25, 5.25, heading)
        obs = observe(grid, pose)
        assert obs.visible_cells
        for r, c in obs.visible_cells:
            if (r, c) == grid.cell_of(pose.xy):
                continue
            x, y = grid.center((r, c))
            assert math.hypot(x - pose.x, y - pose.y) <= 5.0 + 1e-9
            off = (math.degrees(math.atan2(y - pose.y, x - pose.x)) - heading + 180) % 360 - 180
            assert abs(off) <= 45 + 1e-9


def test_open_map_fov_is_complete():
    grid = GridMap(np.zeros((20, 20), dtype=bool), 0.5, ((9.75, 9.75),))
    pose = Pose(5.25, 5.25, 0)
    obs = observe(grid, pose)
    for r in range(20):
        for c in range(20):
            x, y = grid.center((r, c))
            d = math.hypot(x - pose.x, y - pose.y)
            off = math.degrees(math.atan2(y - pose.y, x - pose.x))
            if 0 < d <= 5.0 - 1e-6 and abs(off) < 45 - 1e-6:
                assert (r, c) in obs.visible_cells


def test_wall_occludes_cells_behind_it():
    rows = open_rows(10, 10, targets=[(5, 8)])
    rows = [r[:5] + "#" + r[6:] for r in rows]
    grid = grid_from_rows(rows, resolution=0.2)
    obs = observe(grid, Pose(*grid.center((5, 2)), 0))
    assert not any(c > 5 for _, c in obs.visible_cells)
    assert obs.visible_targets == ()


def test_target_visible_in_open_space():
    grid = grid_from_rows(open_rows(10, 10, targets=[(5, 8)]), resolution=0.2)
    obs = observe(grid, Pose(*grid.center((5, 2)), 0))
    assert obs.visible_targets == grid.targets


def test_panoramic_headings_and_pose_unchanged(open_grid):
    pose = Pose(1.0, 1.0, 30)
    scan = panoramic(open_grid, pose)
    assert scan.headings == (30, 120, 210, 300)
    assert all(v.origin.xy == pose.xy for v in scan.views)
    assert pose.heading == 30


def test_panoramic_sectors_cover_every_bearing():
    for h0 in range(0, 360, 30):
        heads = [(h0 + 90 * i) % 360 for i in range(4)]
        for b in range(360):
            assert any(abs((b - h + 180) % 360 - 180) <= 45 for h in heads)


def test_observe_is_deterministic(open_grid):
    p = Pose(1.0, 1.0, 60)
    assert observe(open_grid, p) == observe(open_grid, p)


def test_distance_field_is_bit_exact_on_ties():
    # equal geodesics must compare equal, or the no-progress check fires on a tie
    rng = np.random.default_rng(17)
    for _ in range(10):
        grid = random_grid(rng, 20, 20, 0.2)
        src = grid.cell_of(grid.targets[0])
        field = grid.distance_field([src]) / grid.resolution
        for cell, (s, d) in dijkstra_pairs(grid, src).items():
            assert field[cell] == s + d * math.sqrt(2.0)
