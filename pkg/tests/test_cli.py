import csv
import json
import subprocess
import sys

import pytest

from dualnav.cli import main
from dualnav.controller import Mode, StepRecord
from dualnav.dataset import dumps, read_jsonl, validate_record
from dualnav.env import MetaAction, Pose, load_map, step
from dualnav.planner import replay

M, L, E = MetaAction.MOVE_AHEAD, MetaAction.ROTATE_LEFT, MetaAction.END


@pytest.fixture(scope="module")
def maps(tmp_path_factory):
    out = tmp_path_factory.mktemp("maps")
    assert main(["map-gen", "--count", "10", "--size", "20", "20", "--density", "0.15", "--seed", "2024",
                 "--out", str(out)]) == 0
    return out


def _files(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if p.is_file()}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_map_gen_deterministic(tmp_path):
    args = ["map-gen", "--count", "2", "--size", "30", "30", "--density", "0.2", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and len([n for n in a if n.endswith(".map")]) == 2
    for name, data in a.items():
        if name.endswith(".map"):
            load_map(data.decode(), name)


def test_map_gen_rejects_high_density(tmp_path, capsys):
    assert main(["map-gen", "--density", "0.9", "--out", str(tmp_path)]) == 1
    assert "density" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["teleport"],
    ["rollout", "--episodes", "0", "--out", "x"],
    ["rollout", "--policy", "psychic", "--out", "x"],
    ["rollout", "--maps", "/nonexistent/dir", "--out", "x"],
    ["rollout", "--map-gen", "size=20x20"],
    ["sweep-tau", "--logs", "a", "--tau-grid", "", "--out", "x"],
    ["sweep-tau", "--logs", "a", "--tau-grid", "0.1,-2", "--out", "x"],
    ["synth", "stage9", "--out", "x"],
])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_rollout_oracle_suite(maps, tmp_path):
    out = tmp_path / "o"
    assert main(["rollout", "--maps", str(maps), "--episodes", "10", "--policy", "oracle", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["sr"] == 1.0 and report["n_episodes"] == 10
    assert len(read_jsonl(out / "episodes.jsonl")) == 10
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["policy"] == "oracle" and cfg["episodes"] == 10


def test_rollout_stuck_suite(maps, tmp_path):
    out = tmp_path / "s"
    assert main(["rollout", "--maps", str(maps), "--episodes", "5", "--policy", "stuck", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["sr"] == 0.0 and report["stagnation_obs"] > 0


def test_rollout_byte_identical_and_job_independent(maps, tmp_path):
    base = ["rollout", "--maps", str(maps), "--episodes", "8", "--policy", "greedy", "--noise", "0.3", "--seed", "4"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b")]) == 0
    assert main(base + ["--jobs", "2", "--out", str(tmp_path / "c")]) == 0
    a, b, c = _files(tmp_path / "a"), _files(tmp_path / "b"), _files(tmp_path / "c")
    assert a == b
    assert a["episodes.jsonl"] == c["episodes.jsonl"] and a["report.json"] == c["report.json"]


def test_config_file_and_flag_precedence(maps, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"episodes": 3, "policy": "stuck", "seed": 5}))
    out = tmp_path / "r"
    assert main(["rollout", "--config", str(conf), "--maps", str(maps), "--policy", "oracle", "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert (cfg["episodes"], cfg["policy"], cfg["seed"]) == (3, "oracle", 5)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"episodez": 3}))
    assert main(["rollout", "--config", str(bad), "--maps", str(maps), "--out", str(out)]) == 1


def test_synth_stage1_records_validate_and_replay(maps, tmp_path):
    out = tmp_path / "s1"
    assert main(["synth", "stage1", "--maps", str(maps), "--episodes", "10", "--out", str(out)]) == 0
    recs = read_jsonl(out / "stage1.jsonl")
    assert len(recs) == 10
    for rec in recs:
        validate_record(rec)
        grid = load_map((maps / f"{rec['meta']['map']}.map").read_text(), rec["meta"]["map"])
        start = Pose.from_dict(rec["meta"]["start"])
        acts = [MetaAction.from_text(t["action"]) for t in rec["turns"]]
        poses, collided = replay(grid, start, acts)
        assert not collided and grid.distance_to_targets(poses[-1].xy) <= 1.0


def test_synth_stage2_segments(maps, tmp_path):
    out = tmp_path / "s2"
    assert main(["synth", "stage2", "--maps", str(maps), "--episodes", "4", "--seg-len", "16", "--out", str(out)]) == 0
    recs = read_jsonl(out / "stage2.jsonl")
    assert recs and all(len([t for t in r["turns"] if not t.get("inserted")]) == 16 for r in recs if not r["terminal"])
    assert sum(r["terminal"] for r in recs) == 4


def test_synth_irft_stuck_outputs_succeed(maps, tmp_path):
    out = tmp_path / "irft"
    assert main(["synth", "irft", "--maps", str(maps), "--episodes", "6", "--policy", "stuck", "--out", str(out)]) == 0
    recs = read_jsonl(out / "irft.jsonl")
    report = json.loads((out / "report.json").read_text())
    assert report["n_success_raw"] == 0
    assert len(recs) == report["n_repaired"]
    assert all(r["outcome"] == "Success" and len(r["steps"]) <= 400 for r in recs)


def _hand_log(tmp_path):
    """One success: 9.0 s optimal, 12.0 s physical (with 1.0 s stop), 100 + 20 tokens."""
    rows = ["#" * 12, "." * 9 + "T..", "#" * 12]
    mp = tmp_path / "maps"
    mp.mkdir()
    (mp / "corr.map").write_text("resolution 0.25\n" + "\n".join(rows) + "\n")
    grid = load_map((mp / "corr.map").read_text(), "corr")
    start = Pose(*grid.center((1, 1)), 0)
    pose, steps = start, []
    toks = [2] * 6 + [1] * 8
    for i, a in enumerate([M] * 8 + [L] * 5 + [E]):
        nxt, ev = step(grid, pose, a)
        steps.append(StepRecord(pose.x, pose.y, pose.heading, a, Mode.SLOW if i == 0 else Mode.FAST,
                                100 if i == 0 else 0, toks[i], tuple(e.value for e in ev)).to_dict())
        pose = nxt
    rec = {"kind": "episode", "version": 1, "map": "corr", "seed": 0,
           "goal": {"x": grid.targets[0][0], "y": grid.targets[0][1]}, "start": start.to_dict(),
           "final": pose.to_dict(), "outcome": "Success", "steps": steps}
    log = tmp_path / "hand.jsonl"
    log.write_text(dumps(rec) + "\n")
    return mp, log, rec


def test_eval_hand_built_log(tmp_path):
    mp, log, _ = _hand_log(tmp_path)
    out = tmp_path / "ev"
    assert main(["eval", "--logs", str(log), "--maps", str(mp), "--stop-s", "1.0", "--out", str(out)]) == 0
    rows = dict(_read_csv(out / "metrics.csv")[1:])
    assert float(rows["sot"]) == pytest.approx(9.0 / 13.8, abs=1e-9)
    assert abs(float(rows["sot"]) - 0.6522) < 5e-5
    assert float(rows["sr"]) == 1.0


def test_eval_missing_tokens_exit_2(tmp_path):
    mp, log, rec = _hand_log(tmp_path)
    del rec["steps"][3]["action_tokens"]
    log.write_text(dumps(rec) + "\n")
    assert main(["eval", "--logs", str(log), "--maps", str(mp), "--out", str(tmp_path / "o")]) == 2


def test_eval_schema_error_exit_2(tmp_path, capsys):
    mp, log, rec = _hand_log(tmp_path)
    rec["steps"][0]["action"] = "Fly"
    log.write_text(dumps(rec) + "\n")
    assert main(["eval", "--logs", str(log), "--maps", str(mp), "--out", str(tmp_path / "o")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_sweep_default_grid_has_seven_rows(tmp_path):
    mp, log, _ = _hand_log(tmp_path)
    out = tmp_path / "sw"
    assert main(["sweep-tau", "--logs", str(log), "--maps", str(mp), "--out", str(out)]) == 0
    rows = _read_csv(out / "sweep.csv")
    assert rows[0] == ["tau", "sot", "sr"] and len(rows) == 8
    assert [float(r[0]) for r in rows[1:]] == [0.0075, 0.015, 0.03, 0.06, 0.12, 0.24, 0.48]
    sots = [float(r[1]) for r in rows[1:]]
    assert all(a > b for a, b in zip(sots, sots[1:]))


def test_sweep_custom_grid(tmp_path):
    mp, log, _ = _hand_log(tmp_path)
    out = tmp_path / "sw"
    assert main(["sweep-tau", "--logs", str(log), "--maps", str(mp), "--tau-grid", "0.01,0.02", "--out", str(out)]) == 0
    assert len(_read_csv(out / "sweep.csv")) == 3


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dualnav.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "map-gen" in proc.stdout
