"""Desk-scale navigation simulators and their curricula."""

from __future__ import annotations

from typing import Sequence

from ..core import DEFAULT_ACTIONS, ActionSpec
from ..errors import ConfigError
from .base import (ENV_KINDS, Episode, NavEnv, RewardConfig, ScenarioSpec, StepOutcome,
                   check_curriculum, dump_curriculum, episodes_from_csv, episodes_to_csv,
                   load_curriculum, rollout)
from .grid import GridEnv
from .terrain import TerrainEnv
from .unicycle import UnicycleEnv

_CLASSES = {"grid": GridEnv, "unicycle": UnicycleEnv, "terrain": TerrainEnv}


def make_env(spec: ScenarioSpec, actions: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> NavEnv:
    try:
        cls = _CLASSES[spec.env_kind]
    except KeyError:
        raise ConfigError(f"unknown env_kind {spec.env_kind!r}") from None
    return cls(spec, actions)


def layout_for(spec: ScenarioSpec):
    return _CLASSES[spec.env_kind].make_layout(spec)


def grid_curriculum(size: int = 5, obstacles: Sequence[int] = (3, 3),
                    start_radii: Sequence[int | None] = (2, None), horizon: int = 40,
                    seed: int = 0) -> list[ScenarioSpec]:
    """Stages share the map seed and goal; early stages start near the goal."""
    if len(obstacles) != len(start_radii):
        raise ConfigError("obstacles and start_radii must have one entry per stage")
    return [ScenarioSpec("grid", stage=k, size=size, n_static=n, horizon=horizon, rng_seed=seed,
                         placement="fixed_goal", start_radius=r)
            for k, (n, r) in enumerate(zip(obstacles, start_radii))]


def freezing_scenario(seed: int = 0) -> ScenarioSpec:
    return ScenarioSpec("unicycle", size=6, n_static=1, placement="blocking", horizon=60, rng_seed=seed)


def oscillation_scenario(seed: int = 0) -> ScenarioSpec:
    return ScenarioSpec("unicycle", size=8, horizon=60, rng_seed=seed)


def terrain_scenario(seed: int = 0, roughness: float = 1.0) -> ScenarioSpec:
    return ScenarioSpec("terrain", size=8, roughness=roughness, horizon=60, rng_seed=seed)


__all__ = [
    "ENV_KINDS", "Episode", "GridEnv", "NavEnv", "RewardConfig", "ScenarioSpec", "StepOutcome",
    "TerrainEnv", "UnicycleEnv", "check_curriculum", "dump_curriculum", "episodes_from_csv",
    "episodes_to_csv", "freezing_scenario", "grid_curriculum", "layout_for", "load_curriculum",
    "make_env", "oscillation_scenario", "rollout", "terrain_scenario",
]
