from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from ..core import DEFAULT_ACTIONS, STOP, ActionSpec, StateLayout
from ..errors import ConfigError, LifecycleError
from .encoding import OccupancyHistory, encode_occupancy, occupancy_from_ranges, ray_angles

ENV_KINDS = ("grid", "unicycle", "terrain")


@dataclass(frozen=True)
class RewardConfig:
    arrival: float = 1.0
    collision: float = -1.0
    progress: float = 0.1
    step: float = -0.01


@dataclass(frozen=True)
class ScenarioSpec:
    """One curriculum stage.

    ``size`` is the grid side in cells (grid) or the arena side in metres. ``placement``
    is ``random``, ``fixed_goal`` (goal drawn once from the scenario seed, start random
    per episode) or ``blocking`` (start and goal on opposite sides with the static
    obstacles on the segment between them). ``start_radius`` (grid, ``fixed_goal`` only) keeps the start
    within that many cells of the goal, which makes an easier curriculum stage.
    """

    env_kind: str = "grid"
    stage: int = 0
    size: float = 5
    n_static: int = 0
    n_dynamic: int = 0
    obstacle_speed: float = 0.0
    obstacle_density: float | None = None
    roughness: float = 0.0
    horizon: int = 50
    rng_seed: int = 0
    placement: str = "random"
    start_radius: float | None = None
    scale: str = "desk"
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ConfigError(f"unknown env_kind {self.env_kind!r}; expected one of {ENV_KINDS}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.n_static < 0 or self.n_dynamic < 0 or self.obstacle_speed < 0 or self.roughness < 0:
            raise ConfigError("obstacle counts, speeds and roughness must be non-negative")
        if self.obstacle_density is not None and not 0 <= self.obstacle_density <= 1:
            raise ConfigError("obstacle_density must lie in [0, 1]")
        if self.placement not in ("random", "fixed_goal", "blocking"):
            raise ConfigError(f"unknown placement {self.placement!r}")
        if self.start_radius is not None and (self.placement != "fixed_goal" or self.start_radius < 1):
            raise ConfigError("start_radius needs fixed_goal placement and must be >= 1")
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"unknown scale {self.scale!r}")
        if isinstance(self.reward, dict):
            object.__setattr__(self, "reward", RewardConfig(**self.reward))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        d = dict(d)
        if "reward" in d:
            extra = set(d["reward"]) - {f.name for f in fields(RewardConfig)}
            if extra:
                raise ConfigError(f"unknown reward keys {sorted(extra)}")
            d["reward"] = RewardConfig(**d["reward"])
        return cls(**d)

    @property
    def difficulty(self) -> tuple:
        """Sort key for curriculum ordering: obstacle load, speed, roughness, start distance."""
        load = self.n_static + self.n_dynamic
        if self.obstacle_density is not None:
            load += self.obstacle_density * float(self.size) ** 2
        reach = math.inf if self.start_radius is None else self.start_radius
        return (load, self.obstacle_speed, self.roughness, reach)


def load_curriculum(path) -> list[ScenarioSpec]:
    doc = yaml.safe_load(Path(path).read_text())
    items = doc.get("scenarios") if isinstance(doc, dict) else doc
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{path}: expected a non-empty list of scenarios")
    return [ScenarioSpec.from_dict(s) for s in items]


def dump_curriculum(specs: Sequence[ScenarioSpec], path=None) -> str:
    text = yaml.safe_dump({"scenarios": [s.to_dict() for s in specs]}, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def check_curriculum(specs: Sequence[ScenarioSpec]) -> None:
    if not specs:
        raise ConfigError("curriculum is empty")
    kinds = {s.env_kind for s in specs}
    if len(kinds) != 1:
        raise ConfigError(f"curriculum mixes env kinds {sorted(kinds)}")
    for a, b in zip(specs, specs[1:]):
        if b.stage < a.stage:
            raise ConfigError("curriculum stages must be non-decreasing")
        if b.difficulty < a.difficulty:
            raise ConfigError(f"stage {b.stage} is easier than stage {a.stage}")


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    done: bool
    collision: bool = False
    goal_reached: bool = False
    froze_this_step: bool = False
    omega: tuple[float, float] | None = None
    vibration: float | None = None


class NavEnv:
    """Shared lifecycle, reward and encoding for the three simulators."""

    kind = ""
    rays_per_column: int | None = 8

    def __init__(self, spec: ScenarioSpec, actions: Sequence[ActionSpec] = DEFAULT_ACTIONS):
        self.spec = spec
        self.actions = tuple(actions)
        self.layout = self.make_layout(spec)
        self.angles = ray_angles(self.layout, None if spec.scale == "full" else self.rays_per_column)
        self.history = OccupancyHistory(self.layout)
        self.t = 0
        self.done = True
        self.prev_action = STOP
        self.state: np.ndarray | None = None
        self.map_rng = np.random.default_rng([spec.rng_seed, 0x5EED])
        self.build_map()

    # -- hooks -------------------------------------------------------------

    @classmethod
    def make_layout(cls, spec: ScenarioSpec) -> StateLayout:
        raise NotImplementedError

    def build_map(self) -> None:
        pass

    def place(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def ranges(self) -> np.ndarray:
        raise NotImplementedError

    def goal_polar(self) -> tuple[float, float]:
        raise NotImplementedError

    def extras(self) -> np.ndarray:
        return np.zeros(0)

    def move(self, action: ActionSpec) -> dict:
        """Apply one action; returns flags ``collision`` and ``goal_reached``."""
        raise NotImplementedError

    # -- lifecycle ---------------------------------------------------------

    def snapshot(self) -> np.ndarray:
        return occupancy_from_ranges(self.ranges(), self.angles, self.layout).reshape(-1)

    def observe(self, snap: np.ndarray, hist) -> np.ndarray:
        d, b = self.goal_polar()
        return encode_occupancy(snap, hist, d, b, self.prev_action, self.layout, self.extras())

    def reset(self, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.spec.rng_seed, int(seed)])
        self.t = 0
        self.done = False
        self.prev_action = STOP
        self.place(rng)
        snap = self.snapshot()
        hist = self.history.reset(snap)
        self.history.push(snap)
        self.state = self.observe(snap, hist)
        return self.state.copy()

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise LifecycleError("step() called on a finished episode; call reset() first")
        if not 0 <= int(action) < len(self.actions):
            raise ConfigError(f"action {action} outside the catalog")
        a = self.actions[int(action)]
        d_prev = self.goal_polar()[0]
        flags = self.move(a)
        self.t += 1
        d_new = self.goal_polar()[0]
        r = self.spec.reward
        reward = r.step + r.progress * (d_prev - d_new)
        collision = bool(flags.get("collision", False))
        goal = bool(flags.get("goal_reached", False)) and not collision
        if collision:
            reward += r.collision
        elif goal:
            reward += r.arrival
        self.prev_action = int(action)
        snap = self.snapshot()
        hist = self.history.push(snap)
        self.state = self.observe(snap, hist)
        self.done = collision or goal or self.t >= self.spec.horizon
        froze = a.linear_velocity == 0 and a.angular_velocity == 0 and not goal
        return StepOutcome(self.state.copy(), float(reward), self.done, collision, goal, froze,
                           flags.get("omega"), flags.get("vibration"))


# ---------------------------------------------------------------------------
# Rollouts and logs
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    done: list[bool] = field(default_factory=list)
    collision: list[bool] = field(default_factory=list)
    froze: list[bool] = field(default_factory=list)
    goal_reached: bool = False
    collided: bool = False
    vibration: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def discounted_return(self, gamma: float) -> float:
        return float(sum(gamma ** t * r for t, r in enumerate(self.rewards)))


Policy = Callable[[np.ndarray], int]


def rollout(env: NavEnv, policy: Policy, seed: int, max_steps: int | None = None,
            label: Policy | None = None) -> Episode:
    """Run ``policy`` from ``env.reset(seed)``; stops at done or ``max_steps``."""
    s = env.reset(seed)
    ep = Episode()
    limit = env.spec.horizon if max_steps is None else max_steps
    while not env.done and len(ep) < limit:
        a = int(policy(s))
        out = env.step(a)
        ep.states.append(s)
        ep.actions.append(a)
        ep.rewards.append(out.reward)
        ep.done.append(out.done)
        ep.collision.append(out.collision)
        ep.froze.append(out.froze_this_step)
        if out.vibration is not None:
            ep.vibration.append(out.vibration)
        ep.goal_reached |= out.goal_reached
        ep.collided |= out.collision
        s = out.next_state
    return ep


def episodes_to_csv(episodes: Sequence[Episode], path=None) -> str:
    """Trajectory log: one row per step (episode, t, state..., action, reward, done, collision, froze)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = len(episodes[0].states[0]) if episodes and episodes[0].states else 0
    w.writerow(["episode", "t"] + [f"s{j}" for j in range(dim)]
               + ["action", "reward", "done", "collision", "froze"])
    for e, ep in enumerate(episodes):
        for t in range(len(ep)):
            w.writerow([e, t] + [format(v, ".17g") for v in ep.states[t]]
                       + [ep.actions[t], format(ep.rewards[t], ".17g"), int(ep.done[t]),
                          int(ep.collision[t]), int(ep.froze[t])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def episodes_from_csv(text: str) -> list[Episode]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out: dict[int, Episode] = {}
    for r in rows:
        ep = out.setdefault(int(r["episode"]), Episode())
        dim = sum(1 for k in r if k.startswith("s") and k[1:].isdigit())
        ep.states.append(np.array([float(r[f"s{j}"]) for j in range(dim)]))
        ep.actions.append(int(r["action"]))
        ep.rewards.append(float(r["reward"]))
        ep.done.append(bool(int(r["done"])))
        ep.collision.append(bool(int(r["collision"])))
        ep.froze.append(bool(int(r["froze"])))
    return [out[k] for k in sorted(out)]
