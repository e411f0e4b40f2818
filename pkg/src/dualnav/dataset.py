"""Training-record formatting and the JSONL interchange format.

Stage-1 records are plain action conversations. Stage-2 records cut a
trajectory into fixed-length segments, each opened by the landmark memory and
a reasoning turn and closed by ``obs`` (or by ``end`` for the last segment).
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable, Sequence

import jsonschema

from .agents import compose_reasoning, token_count
from .controller import SCHEMA_VERSION, Episode
from .env import GridMap, MetaAction, Point
from .errors import ReplayMismatch, SchemaError
from .explore import Trajectory
from .memory import IMAGE, MemoryGraph
from .planner import replay

DEFAULT_SEG_LEN = 16
PANORAMA = IMAGE * 4


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("dualnav").joinpath("templates").joinpath(f"{name}_system.txt").read_text(encoding="utf-8")


def goal_text(goal: Point) -> str:
    return f"target at ({goal[0]:.2f}, {goal[1]:.2f})"


def system_instruction(stage: str, goal: Point) -> str:
    return load_template(stage).format(goal=goal_text(goal))


def _meta(traj: Trajectory, seed: int) -> dict:
    return {
        "map": traj.map_name,
        "seed": seed,
        "goal": {"x": traj.goal[0], "y": traj.goal[1]},
        "start": traj.start.to_dict(),
    }


def check_replay(grid: GridMap, traj: Trajectory) -> None:
    poses, collided = replay(grid, traj.start, traj.actions)
    if collided:
        raise ReplayMismatch(f"trajectory on {traj.map_name} collides during replay")
    if len(traj.poses) != len(poses):
        raise ReplayMismatch(f"trajectory has {len(traj.poses)} poses, replay gives {len(poses)}")
    for i, (want, got) in enumerate(zip(traj.poses, poses)):
        if want != got:
            raise ReplayMismatch(f"pose {i} differs from replay: logged {want}, replayed {got}")


# -- stage 1 -----------------------------------------------------------------

@dataclass(frozen=True)
class ConversationRecord:
    system_instruction: str
    turns: tuple[tuple[str, str], ...]  # (view ref, action text)
    meta: dict

    def to_dict(self) -> dict:
        return {
            "kind": "stage1", "version": SCHEMA_VERSION,
            "system": self.system_instruction,
            "turns": [{"view": v, "action": a} for v, a in self.turns],
            "meta": self.meta,
        }


def format_stage1(traj: Trajectory, grid: GridMap, seed: int = 0) -> ConversationRecord:
    check_replay(grid, traj)
    if not traj.actions or traj.actions[-1] not in (MetaAction.END, MetaAction.OBS):
        raise ReplayMismatch("trajectory must finish with End or Obs")
    turns = tuple((IMAGE, MetaAction(a).text) for a in traj.actions)
    return ConversationRecord(system_instruction("stage1", traj.goal), turns, _meta(traj, seed))


# -- stage 2 -----------------------------------------------------------------

ReasoningFn = Callable[[Point, int, float], str]


@dataclass(frozen=True)
class SegmentRecord:
    index: int  # 1-based
    start_step: int
    terminal: bool
    system_instruction: str
    memory_text: str
    landmarks: int
    reasoning_text: str
    reasoning_tokens: int
    actions: tuple[MetaAction, ...]  # trajectory actions covered by this segment
    meta: dict

    @property
    def turns(self) -> list[dict]:
        out = []
        for j, a in enumerate(self.actions):
            turn = {"step": self.start_step + j, "view": PANORAMA if j == 0 else IMAGE, "action": a.text}
            if j == 0:
                turn["reasoning"] = self.reasoning_text
            out.append(turn)
        if not self.terminal:
            out.append({"step": None, "view": IMAGE, "action": MetaAction.OBS.text, "inserted": True})
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "stage2", "version": SCHEMA_VERSION,
            "segment": self.index,
            "start_step": self.start_step,
            "terminal": self.terminal,
            "system": self.system_instruction,
            "memory": self.memory_text,
            "landmarks": self.landmarks,
            "reasoning_tokens": self.reasoning_tokens,
            "turns": self.turns,
            "meta": self.meta,
        }


def _bearing(a: Point, b: Point) -> float:
    return math.degrees(math.atan2(b[1] - a[1], b[0] - a[0]))


def segment_stage2(
    traj: Trajectory,
    seg_len: int = DEFAULT_SEG_LEN,
    reasoner: ReasoningFn | None = None,
    max_landmarks: int = 10,
    seed: int = 0,
) -> list[SegmentRecord]:
    """Cut a trajectory into ``seg_len``-action segments.

    One landmark is recorded at the start of every segment; segment i carries
    the memory of landmarks 1..i (pruned) and reasoning toward the pose the
    segment ends at.
    """
    if seg_len < 1:
        raise ValueError("seg_len must be positive")
    if not traj.actions:
        raise ValueError("trajectory is empty")
    reasoner = reasoner or compose_reasoning
    system = system_instruction("stage2", traj.goal)
    meta = _meta(traj, seed)
    n = len(traj.actions)
    starts = list(range(0, n, seg_len))
    mem = MemoryGraph(max_landmarks=max_landmarks)
    out = []
    for i, k in enumerate(starts, start=1):
        chunk = tuple(traj.actions[k:k + seg_len])
        prev = traj.actions[starts[i - 2]:k] if i > 1 else ()
        mem = mem.append(traj.poses[k], k, tuple(a for a in prev if MetaAction(a).is_locomotion))
        end_pose = traj.poses[min(k + seg_len, n)]
        text = reasoner(traj.goal, len(mem), _bearing(traj.poses[k].xy, end_pose.xy))
        out.append(SegmentRecord(
            i, k, k + seg_len >= n, system, mem.serialize(), len(mem),
            text, token_count(text), chunk, meta,
        ))
    return out


def stage2_actions(records: Iterable[dict]) -> list[str]:
    """Trajectory action texts recovered from serialized segments, dropping inserted turns."""
    return [t["action"] for r in records for t in r["turns"] if not t.get("inserted")]


def irft_record(ep: Episode) -> dict:
    d = ep.to_dict()
    d["kind"] = "irft"
    return d


# -- JSONL -------------------------------------------------------------------

_POSE = {
    "type": "object",
    "properties": {
        "x": {"type": "number"}, "y": {"type": "number"},
        "heading": {"type": "integer", "minimum": 0, "maximum": 330, "multipleOf": 30},
    },
    "required": ["x", "y", "heading"],
    "additionalProperties": False,
}
_POINT = {
    "type": "object",
    "properties": {"x": {"type": "number"}, "y": {"type": "number"}},
    "required": ["x", "y"],
    "additionalProperties": False,
}
_ACTION_VALUE = {"enum": [a.value for a in MetaAction]}
_ACTION_TEXT = {"enum": [a.text for a in MetaAction]}
_COUNT = {"type": "integer", "minimum": 0}
_META = {
    "type": "object",
    "properties": {"map": {"type": "string"}, "seed": _COUNT, "goal": _POINT, "start": _POSE},
    "required": ["map", "seed", "goal", "start"],
    "additionalProperties": False,
}


def _episode_schema(kind: str) -> dict:
    step = {
        "type": "object",
        "properties": {
            "x": {"type": "number"}, "y": {"type": "number"},
            "heading": _POSE["properties"]["heading"],
            "action": _ACTION_VALUE,
            "mode": {"enum": ["slow", "fast"]},
            "reasoning_tokens": _COUNT, "action_tokens": _COUNT,
            "events": {"type": "array", "items": {"type": "string"}},
            "reasoning": {"type": "string"},
        },
        # token counts may be absent; metrics then raise MissingTokenCounts
        "required": ["x", "y", "heading", "action", "mode", "events"],
        "additionalProperties": False,
    }
    return {
        "type": "object",
        "properties": {
            "kind": {"const": kind}, "version": {"const": SCHEMA_VERSION},
            "map": {"type": "string"}, "seed": _COUNT,
            "goal": _POINT, "start": _POSE, "final": _POSE,
            "outcome": {"enum": ["Success", "Timeout", "Misidentification", "Running"]},
            "steps": {"type": "array", "items": step},
            "meta": {"type": "object"},
        },
        "required": ["kind", "version", "map", "seed", "goal", "start", "final", "outcome", "steps"],
        "additionalProperties": False,
    }


SCHEMAS = {
    "episode": _episode_schema("episode"),
    "irft": _episode_schema("irft"),
    "stage1": {
        "type": "object",
        "properties": {
            "kind": {"const": "stage1"}, "version": {"const": SCHEMA_VERSION},
            "system": {"type": "string", "minLength": 1},
            "turns": {
                "type": "array", "minItems": 1,
                "items": {
                    "type": "object",
                    "properties": {"view": {"const": IMAGE}, "action": _ACTION_TEXT},
                    "required": ["view", "action"],
                    "additionalProperties": False,
                },
            },
            "meta": _META,
        },
        "required": ["kind", "version", "system", "turns", "meta"],
        "additionalProperties": False,
    },
    "stage2": {
        "type": "object",
        "properties": {
            "kind": {"const": "stage2"}, "version": {"const": SCHEMA_VERSION},
            "segment": {"type": "integer", "minimum": 1},
            "start_step": _COUNT,
            "terminal": {"type": "boolean"},
            "system": {"type": "string", "minLength": 1},
            "memory": {"type": "string", "pattern": r"^At landmark1, .*Your current view is <image>\.$"},
            "landmarks": {"type": "integer", "minimum": 1},
            "reasoning_tokens": _COUNT,
            "turns": {
                "type": "array", "minItems": 1,
                "items": {
                    "type": "object",
                    "properties": {
                        "step": {"type": ["integer", "null"], "minimum": 0},
                        "view": {"enum": [IMAGE, PANORAMA]},
                        "action": _ACTION_TEXT,
                        "reasoning": {"type": "string"},
                        "inserted": {"const": True},
                    },
                    "required": ["step", "view", "action"],
                    "additionalProperties": False,
                },
            },
            "meta": _META,
        },
        "required": ["kind", "version", "segment", "start_step", "terminal", "system", "memory",
                     "landmarks", "reasoning_tokens", "turns", "meta"],
        "additionalProperties": False,
    },
}


def _check_structure(rec: dict) -> None:
    """Cross-field checks a JSON schema cannot express."""
    kind = rec["kind"]
    if kind in ("episode", "irft"):
        for s in rec["steps"][:-1]:
            if s["action"] == MetaAction.END.value:
                raise jsonschema.ValidationError("End before the last step")
    elif kind == "stage2":
        turns = rec["turns"]
        if "reasoning" not in turns[0] or turns[0]["view"] != PANORAMA:
            raise jsonschema.ValidationError("first turn must carry the panorama and reasoning")
        real = [t for t in turns if not t.get("inserted")]
        if [t["step"] for t in real] != list(range(rec["start_step"], rec["start_step"] + len(real))):
            raise jsonschema.ValidationError("turn steps are not consecutive")
        if rec["terminal"] == bool(turns[-1].get("inserted")):
            raise jsonschema.ValidationError("only non-terminal segments close with an inserted obs")
        if rec["terminal"] and turns[-1]["action"] != MetaAction.END.text:
            raise jsonschema.ValidationError("terminal segment must finish with end")
        if any(t.get("inserted") for t in turns[:-1]):
            raise jsonschema.ValidationError("inserted turn before the end of the segment")
        if rec["reasoning_tokens"] != token_count(turns[0]["reasoning"]):
            raise jsonschema.ValidationError("reasoning_tokens disagrees with the reasoning text")
    elif kind == "stage1":
        if rec["turns"][-1]["action"] not in (MetaAction.END.text, MetaAction.OBS.text):
            raise jsonschema.ValidationError("conversation must finish with end or obs")


_VALIDATORS = {k: jsonschema.Draft202012Validator(s) for k, s in SCHEMAS.items()}


def validate_record(rec: object, line: int | None = None) -> None:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object", line)
    if rec.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {rec.get('version')!r}", line)
    kind = rec.get("kind")
    if kind not in _VALIDATORS:
        raise SchemaError(f"unknown record kind {kind!r}", line)
    try:
        _VALIDATORS[kind].validate(rec)
        _check_structure(rec)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(f"{kind} record invalid at '{where}': {exc.message}", line) from None


def dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | os.PathLike, records: Sequence[dict], validate: bool = True) -> None:
    lines = []
    for i, rec in enumerate(records, start=1):
        if validate:
            validate_record(rec, i)
        lines.append(dumps(rec) + "\n")
    atomic_write(path, "".join(lines))


def read_jsonl(path: str | os.PathLike, validate: bool = True) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed JSON: {exc.msg}", i) from None
            if validate:
                validate_record(rec, i)
            out.append(rec)
    return out


def read_episodes(path: str | os.PathLike) -> list[Episode]:
    out = []
    for i, rec in enumerate(read_jsonl(path), start=1):
        if rec["kind"] not in ("episode", "irft"):
            raise SchemaError(f"expected an episode record, found {rec['kind']!r}", i)
        out.append(Episode.from_dict(rec))
    return out
