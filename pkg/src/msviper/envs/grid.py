"""Cell-grid navigation with eight headings.

An action first rotates the heading by ``round(angular / 0.4)`` eighth-turns, clipped
to +-2, then moves one cell forward when ``linear >= 0.5``. Walls surround the grid.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import FULL_ROW_EDGES, StateLayout
from ..errors import PlacementError
from .base import NavEnv, ScenarioSpec
from .encoding import cast_rays_grid

HEADINGS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
GRID_ROW_EDGES = (0.4, 1.0, 2.0, 3.0)


def rotation_steps(angular: float) -> int:
    return int(np.clip(round(angular / 0.4), -2, 2))


def grid_layout(size: int, scale: str = "desk") -> StateLayout:
    if scale == "full":
        kw = dict(occupancy_columns=10, occupancy_rows=7, row_edges=FULL_ROW_EDGES)
    else:
        kw = dict(occupancy_columns=5, occupancy_rows=3, row_edges=GRID_ROW_EDGES)
    n = kw["occupancy_columns"] * kw["occupancy_rows"] * 3
    return StateLayout(
        extra_features=3, extra_names=("x", "y", "heading"),
        feature_ranges={
            n: (0.0, math.hypot(size, size)), n + 1: (-math.pi, math.pi), n + 2: (0.0, 14.0),
            n + 3: (0.0, size - 1.0), n + 4: (0.0, size - 1.0), n + 5: (0.0, 7.0),
        },
        **kw,
    )


class GridEnv(NavEnv):
    kind = "grid"

    @classmethod
    def make_layout(cls, spec: ScenarioSpec) -> StateLayout:
        return grid_layout(int(spec.size), spec.scale)

    def build_map(self) -> None:
        n = int(self.spec.size)
        self.n = n
        self.static = np.zeros((n, n), dtype=bool)
        count = self.spec.n_static
        if self.spec.obstacle_density is not None:
            count = int(round(self.spec.obstacle_density * n * n))
        if count + self.spec.n_dynamic > n * n - 2:
            raise PlacementError(f"{count} obstacles leave no room for start and goal on a {n}x{n} grid")
        order = self.map_rng.permutation(n * n)
        self.fixed_goal = None
        if self.spec.placement == "fixed_goal":
            # drawn before the obstacles so stages sharing a seed share the goal
            g, order = order[0], order[1:]
            self.fixed_goal = (int(g // n), int(g % n))
        cells = order[:count]
        self.static[cells // n, cells % n] = True
        # each dynamic obstacle cycles through a short fixed loop of cells
        self.loops = []
        free = np.argwhere(~self.static)
        for _ in range(self.spec.n_dynamic):
            x0, y0 = free[self.map_rng.integers(len(free))]
            loop = [(int(x0), int(y0))]
            for dx, dy in ((1, 0), (0, 1), (-1, 0), (0, -1)):
                x, y = loop[-1]
                nxt = (min(max(x + dx, 0), n - 1), min(max(y + dy, 0), n - 1))
                if not self.static[nxt]:
                    loop.append(nxt)
            self.loops.append(loop)
        self.period = max(1, int(round(1.0 / self.spec.obstacle_speed))) if self.spec.obstacle_speed > 0 else 0

    def dynamic_cells(self, t: int | None = None) -> list[tuple[int, int]]:
        if not self.loops:
            return []
        t = self.t if t is None else t
        k = t // self.period if self.period else 0
        return [loop[k % len(loop)] for loop in self.loops]

    def blocked(self) -> np.ndarray:
        b = self.static.copy()
        for c in self.dynamic_cells():
            b[c] = True
        return b

    def place(self, rng) -> None:
        if self.spec.placement == "blocking":
            raise PlacementError("blocking placement is only defined for the continuous arenas")
        free = [tuple(int(v) for v in c) for c in np.argwhere(~self.blocked())]
        if self.fixed_goal is not None:
            free = [c for c in free if c != self.fixed_goal]
            if self.spec.start_radius is not None:
                g = self.fixed_goal
                free = [c for c in free if max(abs(c[0] - g[0]), abs(c[1] - g[1])) <= self.spec.start_radius]
            if self.fixed_goal in self.dynamic_cells(0) or not free:
                raise PlacementError("no free start cell besides the goal")
            self.pos = free[int(rng.integers(len(free)))]
            self.goal = self.fixed_goal
        else:
            if len(free) < 2:
                raise PlacementError("no free cells for start and goal")
            i, j = rng.choice(len(free), size=2, replace=False)
            self.pos, self.goal = free[i], free[j]
        self.heading = int(rng.integers(8))

    def ranges(self) -> np.ndarray:
        b = self.blocked()
        b[self.pos] = False
        return cast_rays_grid(self.pos, self.heading * math.pi / 4, self.angles, b,
                              self.layout.row_edges[-1])

    def goal_polar(self) -> tuple[float, float]:
        dx, dy = self.goal[0] - self.pos[0], self.goal[1] - self.pos[1]
        return math.hypot(dx, dy), math.atan2(dy, dx) - self.heading * math.pi / 4

    def extras(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.heading], dtype=float)

    def move(self, action) -> dict:
        self.heading = (self.heading + rotation_steps(action.angular_velocity)) % 8
        x, y = self.pos
        if action.linear_velocity >= 0.5:
            dx, dy = HEADINGS[self.heading]
            x, y = x + dx, y + dy
        if not (0 <= x < self.n and 0 <= y < self.n) or self.static[x, y]:
            return {"collision": True}
        self.pos = (x, y)
        # obstacles advance after the robot moves
        if self.pos in self.dynamic_cells(self.t + 1):
            return {"collision": True}
        return {"goal_reached": self.pos == self.goal}
