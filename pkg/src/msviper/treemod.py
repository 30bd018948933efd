"""Detection and repair of freezing, oscillation and vibration by editing tree nodes.

Every ``fix_*`` function is pure: it returns a new tree together with a ``RepairLog``
listing the nodes it touched. ``N_plus`` counts distinct modified nodes plus added nodes,
which is exactly what ``core.changed_nodes`` recovers from the two trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .cart import PairSet, best_split
from .core import (DEFAULT_VIBRATION_REMAP, ROTATE_LEFT, ROTATE_RIGHT, STOP, DecisionTreePolicy,
                   TreeNode, leaf_id, node_subspace, reduced_action, tree_stats)
from .errors import ConfigError, LayoutError
from .metrics import OscillationDetector


@dataclass
class RepairLog:
    defect: str
    N_1: int
    detected: list[int] = field(default_factory=list)
    changes: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def N_plus(self) -> int:
        return len({c["node_id"] for c in self.changes})

    def record(self, node_id: int, kind: str, before, after) -> None:
        self.changes.append({"node_id": int(node_id), "change_kind": kind, "before": before, "after": after})

    def to_dict(self) -> dict:
        return {"defect": self.defect, "N_1": self.N_1, "N_plus": self.N_plus,
                "detected": [int(i) for i in self.detected], "changes": self.changes, "notes": self.notes}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RepairLog":
        log = cls(d["defect"], int(d["N_1"]), list(d.get("detected", [])), list(d.get("changes", [])),
                  list(d.get("notes", [])))
        if "N_plus" in d and int(d["N_plus"]) != log.N_plus:
            raise ConfigError("repair log N_plus disagrees with its change list")
        return log

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "RepairLog":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _new_log(defect: str, tree: DecisionTreePolicy, detected: Iterable[int]) -> RepairLog:
    return RepairLog(defect, tree_stats(tree)["node_count"], sorted(int(i) for i in detected))


def _check_action(tree: DecisionTreePolicy, a: int, name: str) -> None:
    if not 0 <= int(a) < len(tree.actions):
        raise ConfigError(f"{name}={a} is not in the action catalog")


# ---------------------------------------------------------------------------
# Freezing
# ---------------------------------------------------------------------------


def moving_cells(tree: DecisionTreePolicy, node_id: int) -> int:
    """Occupancy cells whose bounds are not the same in every timestep slot."""
    lay = tree.layout
    if lay.cells_per_slot == 0:
        raise LayoutError("tree layout has no occupancy block")
    sub = node_subspace(tree, node_id).clipped(lay)
    n = lay.cells_per_slot
    lo = sub.lower[: lay.occupancy_size].reshape(lay.timesteps, n)
    hi = sub.upper[: lay.occupancy_size].reshape(lay.timesteps, n)
    static = np.all(lo == lo[0], axis=0) & np.all(hi == hi[0], axis=0)
    return int(n - static.sum())


def detect_freezing(tree: DecisionTreePolicy, a_F: Iterable[int] = (STOP,), m_A: int = 0) -> list[int]:
    """Leaves taking a stop action whose box allows a scene with at most ``m_A`` moving cells."""
    if tree.layout.cells_per_slot == 0:
        raise LayoutError("tree layout has no occupancy block")
    stops = set(int(a) for a in a_F)
    return [i for i in tree.leaves()
            if tree.nodes[i].action in stops and moving_cells(tree, i) <= m_A]


def obstacle_sides(tree: DecisionTreePolicy, node_id: int, occupancy_threshold: float = 0.0) -> tuple[int, int]:
    """(right, left) counts of cells guaranteed occupied in the node's box, over all slots."""
    lay = tree.layout
    sub = node_subspace(tree, node_id).clipped(lay)
    lo = sub.lower[: lay.occupancy_size].reshape(lay.timesteps, lay.occupancy_rows, lay.occupancy_columns)
    sure = (lo > occupancy_threshold).sum(axis=(0, 1))
    angles = lay.column_angles()
    return int(sure[angles < 0].sum()), int(sure[angles > 0].sum())


def fix_freezing(tree: DecisionTreePolicy, detected: Sequence[int], a_R: int = ROTATE_RIGHT,
                 a_L: int = ROTATE_LEFT, occupancy_threshold: float = 0.0) -> tuple[DecisionTreePolicy, RepairLog]:
    """Turn away from the side holding most guaranteed obstacles; ties rotate right."""
    _check_action(tree, a_R, "a_R")
    _check_action(tree, a_L, "a_L")
    log = _new_log("freezing", tree, detected)
    nodes = dict(tree.nodes)
    for i in log.detected:
        n = tree.node(i)
        if not n.is_leaf:
            raise ConfigError(f"node {i} is not a leaf")
        right, left = obstacle_sides(tree, i, occupancy_threshold)
        new = a_L if right > left else a_R
        if new != n.action:
            nodes[i] = TreeNode.leaf(i, new)
            log.record(i, "action_changed", n.action, new)
    return tree.replace(nodes), log


# ---------------------------------------------------------------------------
# Oscillation
# ---------------------------------------------------------------------------


class _StateSet:
    """Insertion-ordered set of state vectors."""

    def __init__(self):
        self._keys: set[bytes] = set()
        self.states: list[np.ndarray] = []

    def add(self, s: np.ndarray) -> None:
        k = np.asarray(s, dtype=float).tobytes()
        if k not in self._keys:
            self._keys.add(k)
            self.states.append(np.array(s, dtype=float))

    def __len__(self) -> int:
        return len(self.states)

    def array(self, dim: int) -> np.ndarray:
        return np.array(self.states).reshape(-1, dim)


@dataclass
class OscillationObservations:
    nodes: list[int] = field(default_factory=list)
    O_C: dict[int, _StateSet] = field(default_factory=dict)
    O_X: dict[int, _StateSet] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"nodes": self.nodes,
                "O_C": {str(k): len(v) for k, v in sorted(self.O_C.items())},
                "O_X": {str(k): len(v) for k, v in sorted(self.O_X.items())}}


def detect_oscillation(tree: DecisionTreePolicy, scenario, detector: OscillationDetector = OscillationDetector(),
                       n_e: int = 10, seed: int = 0, max_steps: int | None = None) -> OscillationObservations:
    """Roll the tree out and sort visited states by whether they sit in an oscillating window."""
    from .envs import make_env

    obs = OscillationObservations()
    if n_e <= 0:
        return obs
    L = detector.window
    nodes: set[int] = set()
    env = make_env(scenario, tree.actions)
    for k in range(n_e):
        s = env.reset(seed + k)
        window: list[tuple[np.ndarray, int, int]] = []
        limit = scenario.horizon if max_steps is None else max_steps
        steps = 0
        while not env.done and steps < limit:
            leaf = leaf_id(tree, s)
            a = tree.nodes[leaf].action
            window.append((s, a, leaf))
            if len(window) > L:
                window.pop(0)
            if len(window) == L and detector([w[1] for w in window], tree.actions):
                for ws, _, wl in window:
                    nodes.add(wl)
                    obs.O_C.setdefault(wl, _StateSet()).add(ws)
            else:
                obs.O_X.setdefault(leaf, _StateSet()).add(s)
            s = env.step(a).next_state
            steps += 1
    obs.nodes = sorted(nodes)
    return obs


def fix_oscillation(tree: DecisionTreePolicy, obs: OscillationObservations, z: bool = False,
                    reduce: Callable[[int], int] | None = None) -> tuple[DecisionTreePolicy, RepairLog]:
    """Slow down oscillating leaves, splitting off the oscillating region when it is separable."""
    reduce = reduce or (lambda a: reduced_action(tree.actions, a))
    log = _new_log("oscillation", tree, obs.nodes)
    nodes = dict(tree.nodes)
    next_id = tree.next_id()
    dim = tree.layout.dim
    for i in log.detected:
        n = tree.node(i)
        if not n.is_leaf:
            raise ConfigError(f"node {i} is not a leaf")
        reduced = reduce(n.action)
        if reduced == n.action:
            log.notes.append(f"leaf {i}: action {n.action} has no reduced counterpart")
            continue
        C = obs.O_C.get(i, _StateSet())
        X = obs.O_X.get(i, _StateSet())
        split = None
        if len(X) and not z:
            pairs = PairSet(np.vstack([C.array(dim), X.array(dim)]),
                            np.r_[np.ones(len(C), dtype=np.int64), np.zeros(len(X), dtype=np.int64)])
            split = best_split(pairs)
            if split is None:
                log.notes.append(f"leaf {i}: oscillating and calm states not separable; action swapped")
        if split is None:
            nodes[i] = TreeNode.leaf(i, reduced)
            log.record(i, "action_changed", n.action, reduced)
            continue
        Xc, Xx = C.array(dim), X.array(dim)
        frac_c_left = np.mean(Xc[:, split.feature] <= split.threshold)
        frac_x_left = np.mean(Xx[:, split.feature] <= split.threshold)
        left_is_c = frac_c_left > frac_x_left
        c_id, x_id = next_id, next_id + 1
        next_id += 2
        left, right = (c_id, x_id) if left_is_c else (x_id, c_id)
        nodes[i] = TreeNode.branch(i, split.feature, split.threshold, left, right)
        nodes[c_id] = TreeNode.leaf(c_id, reduced)
        nodes[x_id] = TreeNode.leaf(x_id, n.action)
        log.record(i, "node_split_added", {"action": n.action},
                   {"feature": split.feature, "threshold": format(split.threshold, ".17g")})
        log.record(c_id, "node_split_added", None, {"action": reduced})
        log.record(x_id, "node_split_added", None, {"action": n.action})
    return tree.replace(nodes), log


# ---------------------------------------------------------------------------
# Vibration
# ---------------------------------------------------------------------------


def _vibration_indices(tree: DecisionTreePolicy, indices) -> tuple[int, ...]:
    if indices is None or isinstance(indices, str):
        indices = tree.layout.group(indices or "angular_velocity")
    indices = tuple(int(i) for i in indices)
    if not indices:
        raise LayoutError("empty angular-velocity index set")
    for i in indices:
        if not 0 <= i < tree.layout.dim:
            raise LayoutError(f"angular-velocity index {i} outside the layout")
    return indices


def detect_vibration_m1(tree: DecisionTreePolicy, indices=None) -> list[int]:
    """Branches splitting on an angular-velocity feature."""
    V = set(_vibration_indices(tree, indices))
    return [i for i in tree.branches() if tree.nodes[i].feature in V]


def fix_vibration_m1(tree: DecisionTreePolicy, detected: Sequence[int], h: float) -> tuple[DecisionTreePolicy, RepairLog]:
    """Shift each detected threshold by ``h``."""
    log = _new_log("vibration1", tree, detected)
    nodes = dict(tree.nodes)
    for i in log.detected:
        n = tree.node(i)
        if n.is_leaf:
            raise ConfigError(f"node {i} is a leaf; threshold shifts need branches")
        t = n.threshold + float(h)
        if t != n.threshold:
            nodes[i] = TreeNode.branch(i, n.feature, t, n.left, n.right)
            log.record(i, "threshold_changed", format(n.threshold, ".17g"), format(t, ".17g"))
    return tree.replace(nodes), log


@dataclass(frozen=True)
class VibrationSpaceSpec:
    """Threshold ``V_b`` on sum_k gamma**lag_k * |x_k|; ``indices`` are (roll, pitch) pairs,
    current timestep first, so index position ``k`` has lag ``k // 2``."""

    V_b: float
    gamma: float = 0.9
    indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.V_b < 0:
            raise ConfigError("V_b must be non-negative")

    def weights(self, n: int) -> np.ndarray:
        return self.gamma ** (np.arange(n) // 2).astype(float)


def _abs_range(lo: float, hi: float) -> tuple[float, float]:
    if lo <= 0 <= hi:
        return 0.0, max(-lo, hi)
    return min(abs(lo), abs(hi)), max(abs(lo), abs(hi))


def box_touches_level(lower, upper, weights, level: float) -> bool:
    """Whether some face of the box (a coordinate pinned at a finite bound) contains a point
    with sum w_k |x_k| == level. The weighted sum is continuous and faces are connected,
    so this holds exactly when the face's [min, max] range of the sum brackets ``level``."""
    lower, upper, w = (np.asarray(a, dtype=float) for a in (lower, upper, weights))
    if np.any(lower > upper):
        return False  # unreachable node: an empty box has no surface
    ranges = np.array([_abs_range(a, b) for a, b in zip(lower, upper)]).reshape(-1, 2)
    with np.errstate(invalid="ignore"):
        wmin = np.where(w > 0, w * ranges[:, 0], 0.0)
        wmax = np.where(w > 0, w * ranges[:, 1], 0.0)
    for k in range(len(w)):
        rest_min = np.delete(wmin, k).sum()
        rest_max = np.delete(wmax, k).sum()
        for b in (lower[k], upper[k]):
            if not np.isfinite(b):
                continue
            fmin = rest_min + w[k] * abs(b)
            fmax = rest_max + w[k] * abs(b)
            if fmin <= level <= fmax:
                return True
    return False


def detect_vibration_m2(tree: DecisionTreePolicy, spec: VibrationSpaceSpec) -> list[int]:
    """Breadth-first search for the shallowest nodes whose box surface crosses the
    vibration-space boundary; crossing nodes are reported and not descended."""
    idx = np.array(_vibration_indices(tree, spec.indices))
    w = spec.weights(len(idx))
    lo_decl, hi_decl = tree.layout.declared_bounds()
    found, frontier = [], [tree.root_id]
    while frontier:
        nxt = []
        for i in frontier:
            sub = node_subspace(tree, i)
            lo = np.maximum(sub.lower, lo_decl)[idx]
            hi = np.minimum(sub.upper, hi_decl)[idx]
            if box_touches_level(lo, hi, w, spec.V_b):
                found.append(i)
            elif not tree.nodes[i].is_leaf:
                nxt.extend((tree.nodes[i].left, tree.nodes[i].right))
        frontier = nxt
    return sorted(found)


def fix_vibration_m2(tree: DecisionTreePolicy, detected: Sequence[int],
                     M_c: Mapping[int, int] = DEFAULT_VIBRATION_REMAP) -> tuple[DecisionTreePolicy, RepairLog]:
    """Remap the action of every leaf at or below a detected node through ``M_c``."""
    M_c = {int(k): int(v) for k, v in M_c.items()}
    for a in M_c.values():
        _check_action(tree, a, "M_c target")
    log = _new_log("vibration2", tree, detected)
    leaves = sorted({l for i in log.detected for l in tree.descendant_leaves(i)})
    missing = sorted({tree.nodes[l].action for l in leaves} - set(M_c))
    if missing:
        raise ConfigError(f"actions {missing} are not in the remap domain")
    nodes = dict(tree.nodes)
    for l in leaves:
        a = tree.nodes[l].action
        if M_c[a] != a:
            nodes[l] = TreeNode.leaf(l, M_c[a])
            log.record(l, "action_changed", a, M_c[a])
    return tree.replace(nodes), log
