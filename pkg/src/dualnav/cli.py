"""Command-line entry point: ``dualnav <command> [options]``.

Exit codes: 0 success, 1 usage or configuration fault, 2 data validation fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agents, dataset, metrics
from .controller import ControllerConfig, run_episode
from .env import GridMap, MetaAction, Pose, dump_map, load_map
from .errors import (
    DualNavError,
    GenerationExhausted,
    MissingTokenCounts,
    ParseError,
    ReplayMismatch,
    SchemaError,
    ValidationError,
)
from .explore import Trajectory, build_exploration_trajectory
from .mapgen import MAX_DENSITY, generate_suite
from .planner import nearest_target, plan_actions, replay
from .synth import StagnationConfig, Task, derive_seed, irft_item, rollout_with_stagnation, summarize
from .timemodel import TimeModel

log = logging.getLogger("dualnav")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DATA_ERRORS = (SchemaError, ParseError, ValidationError, MissingTokenCounts, ReplayMismatch)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


DEFAULTS = {
    "maps": None, "map_gen": None, "episodes": 10, "policy": "oracle", "noise": 0.0, "end_radius": 0.25,
    "pattern": "pace", "reasoner": "stub", "horizon": None, "tokens": agents.STUB_TOKENS,
    "schedule": "stagnation", "seed": 0, "max_steps": 200, "max_landmarks": 10, "seg_len": 16,
    "t_stag": 20, "delta_stag": 0.5, "dt_low": 20, "dt_high": 35, "jobs": 1, "out": None,
    "move_ahead_s": 1.0, "rotate_s": 0.6, "obs_s": 4.0, "stop_s": 0.1, "tau": 0.015,
    "tau_grid": list(metrics.DEFAULT_TAUS), "logs": None,
    "count": 1, "size": [30, 30], "density": 0.2, "targets": 1, "resolution": 0.25,
}


# -- argument parsing ---------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def _add_suite(p):
    p.add_argument("--maps", nargs="+", help="map files or directories of *.map files")
    p.add_argument("--map-gen", dest="map_gen", help="generate maps: size=HxW,density=D,seed=S,count=N")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)


def _add_agents(p):
    p.add_argument("--policy", choices=sorted(agents.POLICIES))
    p.add_argument("--noise", type=float, help="greedy: probability of a random action")
    p.add_argument("--end-radius", dest="end_radius", type=float, help="greedy: stop radius in meters")
    p.add_argument("--pattern", help="stuck: spin, pace or wall")
    p.add_argument("--reasoner", choices=sorted(agents.REASONERS))
    p.add_argument("--horizon", type=int, help="oracle reasoner: actions handed to the fast system")
    p.add_argument("--tokens", type=int, help="reasoning tokens per slow step")
    p.add_argument("--max-landmarks", dest="max_landmarks", type=int)
    p.add_argument("--t-stag", dest="t_stag", type=int)
    p.add_argument("--delta-stag", dest="delta_stag", type=float)
    p.add_argument("--dt-low", dest="dt_low", type=int)
    p.add_argument("--dt-high", dest="dt_high", type=int)


def _add_time(p):
    p.add_argument("--move-ahead-s", dest="move_ahead_s", type=float)
    p.add_argument("--rotate-s", dest="rotate_s", type=float)
    p.add_argument("--obs-s", dest="obs_s", type=float)
    p.add_argument("--stop-s", dest="stop_s", type=float)
    p.add_argument("--tau", type=float, help="seconds per token")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualnav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
        p.add_argument("--out", help="output directory")
        return p

    p = command("map-gen", "generate random occupancy maps")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--density", type=float)
    p.add_argument("--targets", type=int)
    p.add_argument("--resolution", type=float)
    p.add_argument("--seed", type=int)

    p = command("rollout", "run episodes and write the episode log")
    _add_suite(p)
    _add_agents(p)
    p.add_argument("--schedule", choices=["stagnation", "policy", "dense"],
                   help="stagnation: detector-triggered obs; policy: caps only; dense: reason every step")

    p = command("synth", "build training data")
    p.add_argument("stage", choices=["stage1", "stage2", "irft"])
    _add_suite(p)
    _add_agents(p)
    p.add_argument("--seg-len", dest="seg_len", type=int)

    p = command("eval", "compute metrics from an episode log")
    p.add_argument("--logs", nargs="+")
    p.add_argument("--maps", nargs="+")
    p.add_argument("--tau-grid", dest="tau_grid", type=_floats)
    _add_time(p)

    p = command("sweep-tau", "recompute SOT over a grid of tau values")
    p.add_argument("--logs", nargs="+")
    p.add_argument("--maps", nargs="+")
    p.add_argument("--tau-grid", dest="tau_grid", type=_floats)
    _add_time(p)
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(from_file)
    cfg.update(flags)
    _check(cfg)
    return cfg


def _check(cfg: dict) -> None:
    if cfg.get("out") is None:
        raise UsageError("--out is required")
    for key in ("episodes", "count", "seg_len", "max_steps", "max_landmarks", "jobs", "targets", "tokens"):
        if cfg[key] is not None and int(cfg[key]) < 1:
            raise UsageError(f"{key} must be positive")
    if not 0.0 <= cfg["density"] <= MAX_DENSITY:
        raise UsageError(f"density must lie in [0, {MAX_DENSITY}]")
    if not 0.0 <= cfg["noise"] <= 1.0:
        raise UsageError("noise must lie in [0, 1]")
    if not cfg["tau_grid"]:
        raise UsageError("tau grid is empty")
    if any(not t > 0 for t in cfg["tau_grid"]):
        raise UsageError("tau values must be positive")
    if cfg["pattern"] not in ("spin", "pace", "wall"):
        raise UsageError(f"unknown stuck pattern {cfg['pattern']!r}")
    for key in ("move_ahead_s", "rotate_s", "obs_s", "stop_s", "tau"):
        if not cfg[key] > 0:
            raise UsageError(f"{key} must be positive")


# -- shared plumbing ----------------------------------------------------------

def _write(path: Path, text: str) -> None:
    dataset.atomic_write(path, text)


def _echo_config(out: Path, cfg: dict) -> None:
    # the output path itself is left out so reruns elsewhere stay byte-identical
    echo = {k: v for k, v in cfg.items() if k != "out"}
    _write(out / "config.json", json.dumps(echo, sort_keys=True, indent=2) + "\n")


def _parse_gen_spec(spec: str) -> dict:
    fields = {}
    for part in spec.split(","):
        key, _, val = part.partition("=")
        fields[key.strip()] = val.strip()
    try:
        h, w = (int(v) for v in fields.get("size", "30x30").lower().split("x"))
        return {
            "height": h, "width": w, "density": float(fields.get("density", 0.2)),
            "seed": int(fields.get("seed", 0)), "count": int(fields.get("count", 1)),
            "n_targets": int(fields.get("targets", 1)),
        }
    except ValueError:
        raise UsageError(f"bad --map-gen spec {spec!r}") from None


def load_maps(cfg: dict) -> list[GridMap]:
    if cfg.get("map_gen"):
        g = _parse_gen_spec(cfg["map_gen"])
        if not 0.0 <= g["density"] <= MAX_DENSITY:
            raise UsageError(f"density must lie in [0, {MAX_DENSITY}]")
        return generate_suite(g["count"], g["height"], g["width"], g["density"], g["seed"], n_targets=g["n_targets"])
    if not cfg.get("maps"):
        raise UsageError("give --maps or --map-gen")
    files: list[Path] = []
    for entry in cfg["maps"]:
        path = Path(entry)
        if path.is_dir():
            files += sorted(path.glob("*.map"))
        elif path.is_file():
            files.append(path)
        else:
            raise UsageError(f"map path does not exist: {entry}")
    if not files:
        raise UsageError("no map files found")
    return [load_map(f.read_text(encoding="utf-8"), f.stem) for f in files]


def make_tasks(maps: Sequence[GridMap], n: int, seed: int) -> list[Task]:
    """Episode k runs on map k mod |maps| from one of its starts, heading drawn from the seed."""
    tasks = []
    for k in range(n):
        grid = maps[k % len(maps)]
        if not grid.starts:
            raise ValidationError(f"map {grid.name} has no start cell")
        rng = np.random.default_rng([seed, k, 11])
        sx, sy = grid.starts[(k // len(maps)) % len(grid.starts)]
        start = Pose(sx, sy, 30 * int(rng.integers(12)))
        tasks.append(Task(grid, start, nearest_target(grid, start.xy)))
    return tasks


def _controller(cfg: dict) -> ControllerConfig:
    schedule = "dense" if cfg.get("schedule") == "dense" else "adaptive"
    return ControllerConfig(max_steps=cfg["max_steps"], max_landmarks=cfg["max_landmarks"], schedule=schedule)


def _stag(cfg: dict) -> StagnationConfig:
    return StagnationConfig(cfg["t_stag"], cfg["delta_stag"], cfg["dt_low"], cfg["dt_high"], cfg["seed"])


def _policy(cfg: dict):
    kwargs = {"greedy": {"noise": cfg["noise"], "end_radius": cfg["end_radius"]},
              "stuck": {"pattern": cfg["pattern"]}}.get(cfg["policy"], {})
    return agents.make_policy(cfg["policy"], **kwargs)


def _reasoner(cfg: dict):
    kwargs = {"tokens": cfg["tokens"]}
    if cfg["reasoner"] == "oracle":
        kwargs["horizon"] = cfg["horizon"]
    return agents.make_reasoner(cfg["reasoner"], **kwargs)


def _time_model(cfg: dict) -> TimeModel:
    return TimeModel(cfg["move_ahead_s"], cfg["rotate_s"], cfg["obs_s"], cfg["stop_s"], cfg["tau"])


def run_batch(fn: Callable, items: Sequence, jobs: int) -> list:
    """Apply ``fn`` to every item, in order; ``jobs > 1`` uses worker processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _rollout_one(index: int, tasks, cfg: dict) -> dict:
    task = tasks[index]
    seed = derive_seed(cfg["seed"], index)
    policy, reasoner, ctrl = _policy(cfg), _reasoner(cfg), _controller(cfg)
    try:
        if cfg["schedule"] == "stagnation":
            ep = rollout_with_stagnation(task.grid, task.start, task.goal, policy, reasoner, ctrl, _stag(cfg), seed)
        else:
            ep = run_episode(task.grid, task.start, task.goal, policy, reasoner, ctrl, seed)
    except DualNavError as exc:
        return {"fault": f"episode {index}: {type(exc).__name__}: {exc}"}
    return {"episode": ep.to_dict()}


# -- commands -----------------------------------------------------------------

def cmd_map_gen(cfg: dict) -> int:
    out = Path(cfg["out"])
    h, w = cfg["size"]
    maps = generate_suite(cfg["count"], h, w, cfg["density"], cfg["seed"],
                          n_targets=cfg["targets"], resolution=cfg["resolution"])
    for grid in maps:
        text = dump_map(grid)
        load_map(text, grid.name)
        _write(out / f"{grid.name}.map", text)
    _echo_config(out, cfg)
    log.info("wrote %d maps to %s", len(maps), out)
    return EXIT_OK


def cmd_rollout(cfg: dict) -> int:
    out = Path(cfg["out"])
    maps = load_maps(cfg)
    tasks = make_tasks(maps, cfg["episodes"], cfg["seed"])
    results = run_batch(partial(_rollout_one, tasks=tasks, cfg=cfg), list(range(len(tasks))), cfg["jobs"])
    records = [r["episode"] for r in results if "episode" in r]
    faults = [r["fault"] for r in results if "fault" in r]
    for f in faults:
        log.error(f)
    outcomes = [r["outcome"] for r in records]
    report = {
        "n_episodes": len(results),
        "n_faults": len(faults),
        "outcomes": {k: outcomes.count(k) for k in ("Success", "Timeout", "Misidentification")},
        "sr": outcomes.count("Success") / len(results),
        "stagnation_obs": sum(
            1 for r in records for s in r["steps"] if {"Repetitive", "NoProgress"} & set(s["events"])
        ),
    }
    dataset.write_jsonl(out / "episodes.jsonl", records)
    _write(out / "report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    _echo_config(out, cfg)
    log.info("rollout: %d episodes, SR %.3f", len(results), report["sr"])
    return EXIT_OK


def _astar_trajectory(task: Task) -> Trajectory:
    acts = plan_actions(task.grid, task.start, task.goal) + [MetaAction.END]
    poses, _ = replay(task.grid, task.start, acts)
    return Trajectory(task.grid.name, task.start, tuple(acts), tuple(poses), task.goal)


def _stage1_one(index: int, tasks, cfg: dict) -> dict:
    task = tasks[index]
    try:
        traj = _astar_trajectory(task)
        return {"records": [dataset.format_stage1(traj, task.grid, derive_seed(cfg["seed"], index)).to_dict()]}
    except DualNavError as exc:
        return {"fault": f"item {index}: {type(exc).__name__}: {exc}"}


def _stage2_one(index: int, tasks, cfg: dict) -> dict:
    task = tasks[index]
    try:
        traj = build_exploration_trajectory(task.grid, task.start, task.goal)
        dataset.check_replay(task.grid, traj)
        segs = dataset.segment_stage2(traj, cfg["seg_len"], max_landmarks=cfg["max_landmarks"],
                                      seed=derive_seed(cfg["seed"], index))
        return {"records": [s.to_dict() for s in segs]}
    except DualNavError as exc:
        return {"fault": f"item {index}: {type(exc).__name__}: {exc}"}


def _irft_one(index: int, tasks, cfg: dict):
    ctrl = _controller(cfg)
    return irft_item(index, tasks[index], _policy(cfg), _reasoner(cfg), ctrl, _stag(cfg), cfg["seed"])


def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    maps = load_maps(cfg)
    tasks = make_tasks(maps, cfg["episodes"], cfg["seed"])
    stage = cfg["stage"]
    items = list(range(len(tasks)))
    if stage == "irft":
        results = run_batch(partial(_irft_one, tasks=tasks, cfg=cfg), items, cfg["jobs"])
        report = summarize(results)
        for it in results:
            if it.fault:
                log.error("item %d: %s", it.index, it.fault)
        records = [dataset.irft_record(it.episode) for it in results if it.episode is not None]
        _write(out / "report.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    else:
        fn = _stage1_one if stage == "stage1" else _stage2_one
        results = run_batch(partial(fn, tasks=tasks, cfg=cfg), items, cfg["jobs"])
        records = [rec for r in results for rec in r.get("records", [])]
        faults = [r["fault"] for r in results if "fault" in r]
        for f in faults:
            log.error(f)
        report = {"n_items": len(results), "n_faults": len(faults), "n_records": len(records)}
        _write(out / "report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    dataset.write_jsonl(out / f"{stage}.jsonl", records)
    _echo_config(out, cfg)
    log.info("synth %s: %d records", stage, len(records))
    return EXIT_OK


def _load_logs(cfg: dict):
    if not cfg.get("logs"):
        raise UsageError("--logs is required")
    episodes = []
    for path in cfg["logs"]:
        if not os.path.isfile(path):
            raise UsageError(f"log file does not exist: {path}")
        episodes += dataset.read_episodes(path)
    maps = {m.name: m for m in load_maps(cfg)}
    missing = sorted({e.map for e in episodes} - set(maps))
    if missing:
        raise ValidationError(f"episodes reference unknown maps: {missing}")
    return episodes, maps


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    episodes, maps = _load_logs(cfg)
    report = metrics.evaluate(episodes, maps, _time_model(cfg))
    _write(out / "metrics.csv", report.to_csv())
    _echo_config(out, cfg)
    return EXIT_OK


def cmd_sweep_tau(cfg: dict) -> int:
    out = Path(cfg["out"])
    episodes, maps = _load_logs(cfg)
    rows = metrics.tau_sweep(episodes, maps, cfg["tau_grid"], _time_model(cfg))
    _write(out / "sweep.csv", metrics.MetricsReport(len(episodes), 0, 0, 0, 0, tau_sweep=rows).sweep_csv())
    _echo_config(out, cfg)
    return EXIT_OK


COMMANDS = {"map-gen": cmd_map_gen, "rollout": cmd_rollout, "synth": cmd_synth,
            "eval": cmd_eval, "sweep-tau": cmd_sweep_tau}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (GenerationExhausted, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
