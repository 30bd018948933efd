"""Uneven-terrain variant of the unicycle arena.

The ground is a smooth height field (a sum of a few sinusoidal ridges scaled by the
scenario roughness). Each step the robot's roll and pitch rates are taken as

    omega_p = GAIN * |linear| * (longitudinal slope after - before)
    omega_r = GAIN * |linear| * (lateral slope after - before)

so faster driving across ridges shakes more, and flat ground gives zero rates. The
last four (|omega_r|, |omega_p|) pairs, current step first, are appended to the state.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import StateLayout
from .base import ScenarioSpec
from .unicycle import GOAL_TOLERANCE, UnicycleEnv, polar_layout

GAIN = 1.0
N_WAVES = 3
VB_GAMMA = 0.9
RATE_LAGS = 4
RATE_NAMES = tuple(f"{axis}_lag{k}" for k in range(RATE_LAGS) for axis in ("roll", "pitch"))


def terrain_layout(spec: ScenarioSpec) -> StateLayout:
    n = polar_layout(spec).dim
    return polar_layout(spec, RATE_NAMES, {"angular_velocity": tuple(range(n, n + len(RATE_NAMES)))})


def weighted_rates(rates: np.ndarray, gamma: float = VB_GAMMA) -> float:
    """Discounted sum of |roll| + |pitch| over a (lags, 2) array, current step first."""
    rates = np.abs(np.asarray(rates, dtype=float)).reshape(-1, 2)
    return float(np.sum(gamma ** np.arange(len(rates)) * rates.sum(axis=1)))


class TerrainEnv(UnicycleEnv):
    kind = "terrain"

    @classmethod
    def make_layout(cls, spec: ScenarioSpec) -> StateLayout:
        return terrain_layout(spec)

    def build_map(self) -> None:
        super().build_map()
        rng = self.map_rng
        # wave vectors with wavelengths between 1 and 3 m
        k = 2 * math.pi / rng.uniform(1.0, 3.0, size=N_WAVES)
        direction = rng.uniform(0, 2 * math.pi, size=N_WAVES)
        self.wave_k = np.stack([k * np.cos(direction), k * np.sin(direction)], axis=1)
        self.wave_phase = rng.uniform(0, 2 * math.pi, size=N_WAVES)
        self.wave_amp = self.spec.roughness * rng.uniform(0.5, 1.0, size=N_WAVES) / N_WAVES

    def height(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return float(np.sum(self.wave_amp * np.sin(self.wave_k @ p + self.wave_phase)))

    def gradient(self, p) -> np.ndarray:
        c = self.wave_amp * np.cos(self.wave_k @ np.asarray(p, dtype=float) + self.wave_phase)
        return c @ self.wave_k

    def slopes(self) -> tuple[float, float]:
        """(longitudinal, lateral) slope under the robot."""
        g = self.gradient(self.pos)
        c, s = math.cos(self.heading), math.sin(self.heading)
        return float(g[0] * c + g[1] * s), float(-g[0] * s + g[1] * c)

    def place(self, rng) -> None:
        super().place(rng)
        self.rates = np.zeros((RATE_LAGS, 2))

    def extras(self) -> np.ndarray:
        return np.abs(self.rates).reshape(-1)

    def move(self, action) -> dict:
        long0, lat0 = self.slopes()
        self.kinematics(action)
        long1, lat1 = self.slopes()
        speed = abs(action.linear_velocity)
        omega = (GAIN * speed * (lat1 - lat0), GAIN * speed * (long1 - long0))
        self.rates = np.vstack([[omega], self.rates[:-1]])
        flags = {"omega": omega, "vibration": weighted_rates(self.rates)}
        if self.collided():
            flags["collision"] = True
        else:
            flags["goal_reached"] = self.goal_polar()[0] < GOAL_TOLERANCE
        return flags
