"""Evolutionary guidance for a closed-form molecular diffusion sampler."""

from .diffusion import NoiseSchedule, SmoothedDatasetDenoiser, State, build_schedule
from .engine import Engine, RunConfig, RunResult, run
from .errors import EGDError
from .tasks import TASKS, World, WorldConfig, build_world, make_run_config

__all__ = [
    "EGDError",
    "Engine",
    "NoiseSchedule",
    "RunConfig",
    "RunResult",
    "SmoothedDatasetDenoiser",
    "State",
    "TASKS",
    "World",
    "WorldConfig",
    "build_schedule",
    "build_world",
    "make_run_config",
    "run",
]

__version__ = "0.1.0"
