"""Dual-process object-goal navigation toolkit: grid simulator, planners,
landmark memory, stagnation-triggered rollouts, dataset synthesis and metrics."""

from .controller import ControllerConfig, Episode, Outcome, run_episode
from .env import GridMap, MetaAction, Pose, load_map, step
from .timemodel import TimeModel

__version__ = "0.1.0"

__all__ = [
    "ControllerConfig", "Episode", "GridMap", "MetaAction", "Outcome", "Pose", "TimeModel",
    "load_map", "run_episode", "step",
]
