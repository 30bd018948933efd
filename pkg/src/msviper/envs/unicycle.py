"""Continuous-pose differential-drive robot among disc obstacles in a walled square arena."""

from __future__ import annotations

import math

import numpy as np

from ..core import DESK_ROW_EDGES, FULL_ROW_EDGES, StateLayout
from ..errors import PlacementError
from .base import NavEnv, ScenarioSpec
from .encoding import cast_rays_circles

STEP_LENGTH = 0.25      # metres per step at linear velocity 1
TURN_RATE = 0.8         # radians per step at angular velocity 1
ROBOT_RADIUS = 0.2
OBSTACLE_RADIUS = 0.3
GOAL_TOLERANCE = 0.3
CLEARANCE = 1.0         # minimum start/goal distance from a static obstacle centre


def polar_layout(spec: ScenarioSpec, extra_names: tuple[str, ...] = (), groups=None) -> StateLayout:
    if spec.scale == "full":
        kw = dict(occupancy_columns=10, occupancy_rows=7, row_edges=FULL_ROW_EDGES)
    else:
        kw = dict(occupancy_columns=5, occupancy_rows=3, row_edges=DESK_ROW_EDGES)
    n = kw["occupancy_columns"] * kw["occupancy_rows"] * 3
    return StateLayout(
        extra_features=len(extra_names), extra_names=extra_names,
        named_index_groups=groups or {},
        feature_ranges={n: (0.0, math.sqrt(2) * spec.size), n + 1: (-math.pi, math.pi), n + 2: (0.0, 14.0)},
        **kw,
    )


class UnicycleEnv(NavEnv):
    kind = "unicycle"

    @classmethod
    def make_layout(cls, spec: ScenarioSpec) -> StateLayout:
        return polar_layout(spec)

    def build_map(self) -> None:
        L = float(self.spec.size)
        rng = self.map_rng
        self.fixed_static = rng.uniform(1.0, L - 1.0, size=(self.spec.n_static, 2))
        self.loops = []
        for _ in range(self.spec.n_dynamic):
            cx, cy = rng.uniform(2.0, L - 2.0, size=2)
            hw, hh = rng.uniform(0.5, 1.5, size=2)
            corners = np.array([[cx - hw, cy - hh], [cx + hw, cy - hh], [cx + hw, cy + hh], [cx - hw, cy + hh]])
            corners = np.clip(corners, 0.5, L - 0.5)
            self.loops.append((corners, float(rng.uniform(0, 1))))

    def dynamic_positions(self, t: int) -> np.ndarray:
        out = []
        for corners, phase in self.loops:
            seg = np.roll(corners, -1, axis=0) - corners
            lengths = np.hypot(seg[:, 0], seg[:, 1])
            perim = lengths.sum()
            s = (phase * perim + self.spec.obstacle_speed * t) % perim
            k = int(np.searchsorted(np.cumsum(lengths), s, side="right"))
            k = min(k, 3)
            before = lengths[:k].sum()
            out.append(corners[k] + seg[k] * (s - before) / lengths[k])
        return np.array(out).reshape(-1, 2)

    def obstacles(self, t: int | None = None) -> np.ndarray:
        t = self.t if t is None else t
        return np.vstack([self.static, self.dynamic_positions(t)])

    def place(self, rng) -> None:
        L = float(self.spec.size)
        if self.spec.placement == "fixed_goal":
            raise PlacementError("fixed_goal placement is only defined for the grid")
        if self.spec.placement == "blocking":
            self.pos = np.array([1.0, L / 2 + rng.uniform(-0.5, 0.5)])
            self.goal = np.array([L - 1.0, L / 2 + rng.uniform(-0.5, 0.5)])
            d = self.goal - self.pos
            self.heading = math.atan2(d[1], d[0]) + rng.uniform(-0.3, 0.3)
            n = self.spec.n_static
            frac = (np.arange(n) + 1.0) / (n + 1.0)
            normal = np.array([-d[1], d[0]]) / np.hypot(*d)
            jitter = rng.uniform(-0.15, 0.15, size=n)
            self.static = self.pos + frac[:, None] * d + jitter[:, None] * normal
            return
        self.static = self.fixed_static
        obs = self.obstacles(0)
        for _ in range(1000):
            start = rng.uniform(1.0, L - 1.0, size=2)
            goal = rng.uniform(1.0, L - 1.0, size=2)
            if np.hypot(*(goal - start)) < L / 2:
                continue
            if len(obs) and (np.min(np.hypot(*(obs - start).T)) < CLEARANCE
                             or np.min(np.hypot(*(obs - goal).T)) < CLEARANCE):
                continue
            self.pos, self.goal = start, goal
            self.heading = float(rng.uniform(-math.pi, math.pi))
            return
        raise PlacementError("could not place start and goal clear of obstacles")

    def ranges(self) -> np.ndarray:
        obs = self.obstacles()
        L = float(self.spec.size)
        return cast_rays_circles(self.pos, self.heading, self.angles, obs,
                                 np.full(len(obs), OBSTACLE_RADIUS), self.layout.row_edges[-1],
                                 box=(0.0, 0.0, L, L))

    def goal_polar(self) -> tuple[float, float]:
        d = self.goal - self.pos
        return float(np.hypot(*d)), math.atan2(d[1], d[0]) - self.heading

    def kinematics(self, action) -> float:
        """Turn, then drive; returns the distance driven."""
        self.heading = math.remainder(self.heading + TURN_RATE * action.angular_velocity, 2 * math.pi)
        dist = STEP_LENGTH * action.linear_velocity
        self.pos = self.pos + dist * np.array([math.cos(self.heading), math.sin(self.heading)])
        return dist

    def collided(self) -> bool:
        L = float(self.spec.size)
        x, y = self.pos
        if not (ROBOT_RADIUS <= x <= L - ROBOT_RADIUS and ROBOT_RADIUS <= y <= L - ROBOT_RADIUS):
            return True
        obs = self.obstacles(self.t + 1)
        return bool(len(obs) and np.min(np.hypot(*(obs - self.pos).T)) < ROBOT_RADIUS + OBSTACLE_RADIUS)

    def move(self, action) -> dict:
        self.kinematics(action)
        if self.collided():
            return {"collision": True}
        return {"goal_reached": self.goal_polar()[0] < GOAL_TOLERANCE}
