"""Radial occupancy encoding of range scans and state-vector assembly."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core import StateLayout
from ..errors import EncoderError

FULL_SCALE_RAYS = 512


def ray_angles(layout: StateLayout, rays_per_column: int | None = 8) -> np.ndarray:
    """Ray bearings evenly spread over the field of view (positive = left).

    ``rays_per_column=None`` uses the 512-ray full-scale scan.
    """
    n = FULL_SCALE_RAYS if rays_per_column is None else rays_per_column * layout.occupancy_columns
    width = 2 * layout.fov_half_angle / n
    return -layout.fov_half_angle + width * (np.arange(n) + 0.5)


def occupancy_from_ranges(ranges, angles, layout: StateLayout) -> np.ndarray:
    """Fractional coverage per (row, column) cell.

    A cell's value is the fraction of the column's rays whose first return lies in the
    cell's radial band ``[edge_r, edge_{r+1})``. Rays with no return (inf) leave every
    cell of their column empty.
    """
    ranges = np.asarray(ranges, dtype=float)
    angles = np.asarray(angles, dtype=float)
    if ranges.shape != angles.shape:
        raise EncoderError("ranges and angles differ in length")
    C, R = layout.occupancy_columns, layout.occupancy_rows
    width = 2 * layout.fov_half_angle / C
    col = np.clip(np.floor((angles + layout.fov_half_angle) / width).astype(int), 0, C - 1)
    edges = np.asarray(layout.row_edges)
    row = np.searchsorted(edges, ranges, side="right") - 1
    valid = (row >= 0) & (row < R)
    counts = np.zeros((R, C))
    np.add.at(counts, (row[valid], col[valid]), 1.0)
    per_col = np.bincount(col, minlength=C).astype(float)
    per_col[per_col == 0] = 1.0
    return counts / per_col


def encode_occupancy(snapshot, history: Sequence[np.ndarray], goal_distance: float,
                     goal_bearing: float, prev_action: int, layout: StateLayout,
                     extras: Sequence[float] = ()) -> np.ndarray:
    """Assemble a state vector with ``snapshot`` in slot 0 and ``history`` behind it.

    ``history`` holds the two prior snapshots, most recent first.
    """
    cells = layout.cells_per_slot
    snap = np.asarray(snapshot, dtype=float).reshape(-1)
    if snap.size != cells:
        raise EncoderError(f"snapshot has {snap.size} cells, layout expects {cells}")
    if len(history) != layout.timesteps - 1:
        raise EncoderError(f"history must hold {layout.timesteps - 1} snapshots, got {len(history)}")
    hist = [np.asarray(h, dtype=float).reshape(-1) for h in history]
    if any(h.size != cells for h in hist):
        raise EncoderError("history snapshot size differs from layout")
    extras = np.asarray(extras, dtype=float).reshape(-1)
    if extras.size != layout.extra_features:
        raise EncoderError(f"{extras.size} extra features given, layout expects {layout.extra_features}")
    return np.concatenate([snap, *hist, [goal_distance, wrap_angle(goal_bearing), float(prev_action)], extras])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


class OccupancyHistory:
    """Rolling window of the last two encoded snapshots."""

    def __init__(self, layout: StateLayout):
        self.layout = layout
        self.slots: list[np.ndarray] = []

    def reset(self, first: np.ndarray) -> list[np.ndarray]:
        first = np.asarray(first, dtype=float).reshape(-1)
        self.slots = [first.copy() for _ in range(self.layout.timesteps - 1)]
        return list(self.slots)

    def push(self, snap: np.ndarray) -> list[np.ndarray]:
        """Return the history to encode ``snap`` with, then shift ``snap`` in."""
        hist = list(self.slots)
        self.slots = [np.asarray(snap, dtype=float).reshape(-1).copy()] + self.slots[:-1]
        return hist


def cast_rays_circles(origin, heading, angles, centers, radii, max_range: float,
                      box: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """First-hit distances from ``origin`` to discs and, optionally, the walls of ``box``.

    ``box`` is (xmin, ymin, xmax, ymax); rays start inside it.
    """
    ox, oy = origin
    theta = heading + np.asarray(angles)
    dx, dy = np.cos(theta), np.sin(theta)
    out = np.full(theta.shape, np.inf)
    if len(centers):
        c = np.asarray(centers, dtype=float)
        r = np.asarray(radii, dtype=float)
        fx = ox - c[:, 0][:, None]
        fy = oy - c[:, 1][:, None]
        b = fx * dx + fy * dy
        cc = fx * fx + fy * fy - (r * r)[:, None]
        disc = b * b - cc
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t1 = -b - sq
            t2 = -b + sq
        t = np.where(t1 >= 0, t1, np.where(t2 >= 0, 0.0, np.nan))
        t = np.where(np.isnan(t), np.inf, t)
        out = np.minimum(out, t.min(axis=0))
    if box is not None:
        xmin, ymin, xmax, ymax = box
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dx > 0, (xmax - ox) / dx, np.where(dx < 0, (xmin - ox) / dx, np.inf))
            ty = np.where(dy > 0, (ymax - oy) / dy, np.where(dy < 0, (ymin - oy) / dy, np.inf))
        out = np.minimum(out, np.minimum(tx, ty))
    out[out > max_range] = np.inf
    return out


def cast_rays_grid(origin, heading, angles, blocked: np.ndarray, max_range: float,
                   step: float = 0.05) -> np.ndarray:
    """First-hit distances on a cell grid; cell (i, j) covers [i-0.5, i+0.5] x [j-0.5, j+0.5].

    Cells outside the grid count as walls. Distances are quantised to ``step``.
    """
    ox, oy = origin
    theta = heading + np.asarray(angles)
    r = np.arange(step, max_range + step, step)
    px = ox + np.cos(theta)[:, None] * r[None, :]
    py = oy + np.sin(theta)[:, None] * r[None, :]
    ix = np.floor(px + 0.5).astype(int)
    iy = np.floor(py + 0.5).astype(int)
    nx, ny = blocked.shape
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    hit = ~inside
    hit[inside] = blocked[ix[inside], iy[inside]]
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
    out = np.where(first >= 0, r[np.maximum(first, 0)], np.inf)
    out[out > max_range] = np.inf
    return out
