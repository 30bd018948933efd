"""Expert policies: a tabular Q-learner for the grid and scripted controllers.

The scripted controllers read the state vector directly (goal bearing, the nearest
occupancy row, terrain rates) and include deliberately flawed variants whose defects
the repair tools are meant to remove.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .core import DEFAULT_ACTIONS, STOP, ActionSpec, StateLayout
from .envs import ScenarioSpec, check_curriculum, layout_for, make_env
from .envs.terrain import VB_GAMMA, weighted_rates
from .errors import ConfigError, LayoutError, TrainingError

SCRIPTED_KINDS = ("potential_field", "freezing_flawed", "oscillating_flawed", "terrain_speedy")


@dataclass
class ExpertPolicy:
    """Black-box expert: ``act(s) -> action id`` and optionally ``q_values(s) -> array``."""

    act: Callable[[np.ndarray], int]
    q_values: Callable[[np.ndarray], np.ndarray] | None = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    qtable: "QTable | None" = None
    checkpoints: list = field(default_factory=list)

    def __call__(self, s) -> int:
        return int(self.act(np.asarray(s, dtype=float)))

    def manifest(self) -> dict:
        return {"kind": self.kind, "params": self.params}


# ---------------------------------------------------------------------------
# Tabular Q-learning
# ---------------------------------------------------------------------------


def goal_octant(bearing: float) -> int:
    return int(round(bearing / (math.pi / 4))) % 8


class GridDiscretizer:
    """Bucket key (x, y, heading, goal octant) for grid-layout states."""

    def __init__(self, layout: StateLayout):
        self.ix = layout.extra_index("x")
        self.iy = layout.extra_index("y")
        self.ih = layout.extra_index("heading")
        self.ib = layout.goal_bearing_index

    def __call__(self, s) -> tuple[int, ...]:
        return (int(round(s[self.ix])), int(round(s[self.iy])), int(round(s[self.ih])),
                goal_octant(s[self.ib]))


@dataclass
class QParams:
    alpha: float = 0.3
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.0
    episodes: int = 2000     # per curriculum stage
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1 or not 0 <= self.gamma <= 1:
            raise ConfigError("need 0 < alpha <= 1 and 0 <= gamma <= 1")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")


class QTable:
    def __init__(self, discretizer: Callable[[np.ndarray], Hashable], n_actions: int):
        self.discretizer = discretizer
        self.n_actions = n_actions
        self.table: dict[tuple, np.ndarray] = {}

    def row(self, key) -> np.ndarray:
        r = self.table.get(key)
        return np.zeros(self.n_actions) if r is None else r

    def q(self, s) -> np.ndarray:
        return self.row(self.discretizer(s)).copy()

    def greedy(self, s) -> int:
        return int(np.argmax(self.row(self.discretizer(s))))

    def update(self, key, action: int, target: float, alpha: float) -> None:
        r = self.table.setdefault(key, np.zeros(self.n_actions))
        r[action] += alpha * (target - r[action])
        if not math.isfinite(r[action]):
            raise TrainingError(f"Q-value diverged at bucket {key}, action {action}")

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.table.items()}

    def to_csv(self, path=None) -> str:
        """Flat (bucket key, action, value) triples; keys are ``|``-joined integers."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "action", "value"])
        for key in sorted(self.table):
            for a, v in enumerate(self.table[key]):
                w.writerow(["|".join(str(k) for k in key), a, format(float(v), ".17g")])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str, discretizer, n_actions: int) -> "QTable":
        qt = cls(discretizer, n_actions)
        rows = list(csv.DictReader(io.StringIO(text)))
        for r in rows:
            key = tuple(int(k) for k in r["key"].split("|"))
            a = int(r["action"])
            if not 0 <= a < n_actions:
                raise ConfigError(f"Q-table action {a} outside catalog")
            qt.table.setdefault(key, np.zeros(n_actions))[a] = float(r["value"])
        return qt


def tabular_expert(qt: QTable, params: dict | None = None) -> ExpertPolicy:
    return ExpertPolicy(qt.greedy, qt.q, kind="tabular", params=params or {}, qtable=qt)


def train_q_expert(curriculum: Sequence[ScenarioSpec], params: QParams | None = None,
                   actions: Sequence[ActionSpec] = DEFAULT_ACTIONS,
                   discretizer: Callable | None = None) -> ExpertPolicy:
    """Epsilon-greedy Q-learning, stage by stage, carrying one table through the curriculum.

    ``expert.checkpoints`` holds a (start, end) table snapshot pair per stage.
    """
    params = params or QParams()
    curriculum = list(curriculum)
    check_curriculum(curriculum)
    layouts = {json.dumps(layout_for(s).to_dict(), sort_keys=True) for s in curriculum}
    if len(layouts) != 1:
        raise ConfigError("curriculum stages must share one state layout")
    layout = layout_for(curriculum[0])
    if discretizer is None:
        if curriculum[0].env_kind != "grid":
            raise ConfigError("the default discretizer needs grid-layout states")
        discretizer = GridDiscretizer(layout)
    qt = QTable(discretizer, len(actions))
    rng = np.random.default_rng(params.seed)
    checkpoints = []
    for spec in curriculum:
        env = make_env(spec, actions)
        start = qt.snapshot()
        for ep in range(params.episodes):
            frac = ep / max(1, params.episodes - 1)
            eps = params.eps_start + (params.eps_end - params.eps_start) * frac
            s = env.reset(int(rng.integers(2**31)))
            key = discretizer(s)
            while not env.done:
                if rng.random() < eps:
                    a = int(rng.integers(len(actions)))
                else:
                    a = int(np.argmax(qt.row(key)))
                out = env.step(a)
                nkey = discretizer(out.next_state)
                terminal = out.collision or out.goal_reached
                target = out.reward + (0.0 if terminal else params.gamma * float(qt.row(nkey).max()))
                qt.update(key, a, target, params.alpha)
                key = nkey
        checkpoints.append((start, qt.snapshot()))
    expert = tabular_expert(qt, {"q": asdict(params), "curriculum": [s.to_dict() for s in curriculum]})
    expert.checkpoints = checkpoints
    return expert


# ---------------------------------------------------------------------------
# Scripted controllers
# ---------------------------------------------------------------------------


def _seek(bearing: float) -> int:
    """Turn toward the goal, driving whenever it is roughly ahead."""
    if abs(bearing) < 0.2:
        return 2
    left = bearing > 0
    if abs(bearing) < 0.6:
        return 10 if left else 9
    if abs(bearing) < 1.2:
        return 4 if left else 0
    return 5 if left else 1


class _Reader:
    def __init__(self, layout: StateLayout):
        self.layout = layout
        C = layout.occupancy_columns
        self.near = np.array([layout.occupancy_index(0, 0, c) for c in range(C)])
        self.mid = np.array([layout.occupancy_index(0, min(1, layout.occupancy_rows - 1), c) for c in range(C)])
        self.angles = layout.column_angles()
        self.front = np.abs(self.angles) < 0.9

    def bearing(self, s) -> float:
        return float(s[self.layout.goal_bearing_index])


def scripted_expert(kind: str, layout: StateLayout, **params) -> ExpertPolicy:
    """Deterministic controller of the named ``kind`` (see ``SCRIPTED_KINDS``)."""
    if kind not in SCRIPTED_KINDS:
        raise ConfigError(f"unknown expert kind {kind!r}; expected one of {SCRIPTED_KINDS}")
    rd = _Reader(layout)

    if kind == "potential_field":
        threshold = float(params.pop("threshold", 0.0))

        def act(s):
            near, mid = s[rd.near], s[rd.mid]
            # obstacles to the left push right and vice versa
            left_load = near[rd.angles > 0].sum() + 0.5 * mid[rd.angles > 0].sum()
            right_load = near[rd.angles < 0].sum() + 0.5 * mid[rd.angles < 0].sum()
            if np.any(near[rd.front] > threshold):
                return 1 if left_load > right_load else 5
            if np.any(mid[rd.front] > threshold):
                return 11 if left_load > right_load else 12
            return _seek(rd.bearing(s))

    elif kind == "freezing_flawed":
        threshold = float(params.pop("threshold", 0.0))

        def act(s):
            if np.any(s[rd.near] > threshold):
                return STOP
            return _seek(rd.bearing(s))

    elif kind == "oscillating_flawed":
        deadband = float(params.pop("deadband", 0.2))

        def act(s):
            b = rd.bearing(s)
            if abs(b) <= deadband:
                return 2
            return 4 if b > 0 else 0

    else:  # terrain_speedy
        vb_threshold = float(params.pop("vb_threshold", 2.0))
        gamma = float(params.pop("gamma", VB_GAMMA))
        try:
            rates = np.array(layout.group("angular_velocity"))
        except LayoutError:
            raise ConfigError("terrain_speedy needs a layout with an angular_velocity group") from None

        def act(s):
            b = rd.bearing(s)
            if weighted_rates(s[rates], gamma) > vb_threshold:
                return 13 if b < 0 else 14
            if abs(b) < 0.3:
                return 2
            return 10 if b > 0 else 9

        if params:
            raise ConfigError(f"unknown parameters for {kind}: {sorted(params)}")
        return ExpertPolicy(act, None, kind=kind, params={"vb_threshold": vb_threshold, "gamma": gamma})

    if params:
        raise ConfigError(f"unknown parameters for {kind}: {sorted(params)}")
    stored = {"threshold": threshold} if kind != "oscillating_flawed" else {"deadband": deadband}
    return ExpertPolicy(act, None, kind=kind, params=stored)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_expert(expert: ExpertPolicy, directory, layout: StateLayout, seed: int | None = None) -> Path:
    """Write ``expert.json`` (and ``qtable.csv`` for tabular experts) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"kind": expert.kind, "params": expert.params, "layout": layout.to_dict(), "seed": seed}
    if expert.qtable is not None:
        expert.qtable.to_csv(directory / "qtable.csv")
        doc["qtable"] = "qtable.csv"
    path = directory / "expert.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_expert(path) -> tuple[ExpertPolicy, StateLayout]:
    """Inverse of ``save_expert``; ``path`` is the manifest or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "expert.json"
    if not path.exists():
        raise ConfigError(f"expert manifest {path} not found")
    doc = json.loads(path.read_text())
    layout = StateLayout.from_dict(doc["layout"])
    if doc["kind"] == "tabular":
        text = (path.parent / doc["qtable"]).read_text()
        qt = QTable.from_csv(text, GridDiscretizer(layout), layout.n_actions)
        return tabular_expert(qt, doc["params"]), layout
    return scripted_expert(doc["kind"], layout, **dict(doc["params"])), layout


def greedy_eval(expert: ExpertPolicy | Callable, spec: ScenarioSpec, episodes: int = 100,
                seed: int = 0) -> Mapping[str, float]:
    """Goal and collision rates of ``expert`` over ``episodes`` resets."""
    from .envs import rollout

    env = make_env(spec)
    goals = collisions = 0
    for k in range(episodes):
        ep = rollout(env, expert, seed=seed + k)
        goals += ep.goal_reached
        collisions += ep.collided
    return {"goal_rate": goals / episodes, "collision_rate": collisions / episodes}
