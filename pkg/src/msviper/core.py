"""Decision-tree policies over navigation state vectors.

A state vector is laid out as::

    [occupancy slot 0 | slot 1 | slot 2 | goal distance, goal bearing | prev action | extras]

Slot 0 is the current occupancy snapshot, slots 1 and 2 the two before it. Within a
slot cells are row-major (row 0 nearest the robot), columns ordered by increasing
bearing, so column 0 looks furthest to the right.

Branch nodes send a state left when ``s[feature] <= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LayoutError

FORMAT_VERSION = 1
FOV_HALF_ANGLE = 2.0 * math.pi / 3.0


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSpec:
    id: int
    linear_velocity: float
    angular_velocity: float

    @property
    def turn_sign(self) -> int:
        """+1 for a left (counter-clockwise) turn, -1 for right, 0 for none."""
        return int(np.sign(self.angular_velocity))


_TABLE_V = (
    (1.0, -1.0),
    (0.0, -1.0),
    (1.0, 0.0),
    (0.0, 0.0),
    (1.0, 1.0),
    (0.0, 1.0),
    (0.4, 0.0),
    (0.0, -0.4),
    (0.0, 0.4),
    (1.0, -0.4),
    (1.0, 0.4),
    (0.4, -1.0),
    (0.4, 1.0),
    (0.4, -0.4),
    (0.4, 0.4),
)

DEFAULT_ACTIONS: tuple[ActionSpec, ...] = tuple(
    ActionSpec(i, lin, ang) for i, (lin, ang) in enumerate(_TABLE_V)
)

STOP = 3
ROTATE_RIGHT = 1
ROTATE_LEFT = 5

# Vibration remap used by method 2 of the vibration repair (source -> target).
DEFAULT_VIBRATION_REMAP: dict[int, int] = {
    0: 13, 1: 7, 2: 6, 3: 3, 4: 14, 8: 6, 7: 8,
    9: 13, 10: 14, 11: 13, 12: 14, 13: 13, 14: 14,
}


def validate_catalog(actions: Sequence[ActionSpec]) -> None:
    if not actions:
        raise ConfigError("action catalog is empty")
    for i, a in enumerate(actions):
        if a.id != i:
            raise ConfigError(f"action ids must be consecutive from 0; got {a.id} at position {i}")


def reduced_action(actions: Sequence[ActionSpec], action: int, factor: float = 0.4) -> int:
    """Catalog action nearest to ``factor * (linear, angular)`` of ``action``.

    Ties go to the lower id.
    """
    a = actions[action]
    target = np.array([factor * a.linear_velocity, factor * a.angular_velocity])
    best, best_d = action, math.inf
    for b in actions:
        d = float(np.hypot(*(np.array([b.linear_velocity, b.angular_velocity]) - target)))
        if d < best_d - 1e-12:
            best, best_d = b.id, d
    return best


# ---------------------------------------------------------------------------
# State layout
# ---------------------------------------------------------------------------

DESK_ROW_EDGES = (0.2, 0.6, 1.2, 2.0)
FULL_ROW_EDGES = (0.1, 0.3, 0.5, 0.7, 1.0, 2.0, 3.0, 4.0)


@dataclass(frozen=True)
class StateLayout:
    occupancy_columns: int = 5
    occupancy_rows: int = 3
    timesteps: int = 3
    goal_features: int = 2
    prev_action_features: int = 1
    extra_features: int = 0
    extra_names: tuple[str, ...] = ()
    named_index_groups: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    row_edges: tuple[float, ...] = DESK_ROW_EDGES
    fov_half_angle: float = FOV_HALF_ANGLE
    n_actions: int = len(DEFAULT_ACTIONS)
    # Finite physical ranges for individual features; occupancy cells are always [0, 1].
    feature_ranges: Mapping[int, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.timesteps != 3:
            raise LayoutError("occupancy history is fixed at 3 timesteps")
        if self.goal_features not in (0, 2) or self.prev_action_features not in (0, 1):
            raise LayoutError("goal block must have 2 features and prev-action block 1 (or 0 for plain layouts)")
        if self.occupancy_columns < 0 or self.occupancy_rows < 0 or self.extra_features < 0:
            raise LayoutError("negative feature counts")
        if self.occupancy_rows and len(self.row_edges) != self.occupancy_rows + 1:
            raise LayoutError(
                f"row_edges needs {self.occupancy_rows + 1} entries, got {len(self.row_edges)}"
            )
        if self.extra_names and len(self.extra_names) != self.extra_features:
            raise LayoutError("extra_names must name every extra feature")
        object.__setattr__(
            self, "named_index_groups",
            {k: tuple(int(i) for i in v) for k, v in self.named_index_groups.items()},
        )
        object.__setattr__(
            self, "feature_ranges",
            {int(k): (float(lo), float(hi)) for k, (lo, hi) in self.feature_ranges.items()},
        )
        reserved = set(range(self.occupancy_size, self.occupancy_size + self.goal_features + self.prev_action_features))
        for name, idx in self.named_index_groups.items():
            for i in idx:
                if not 0 <= i < self.dim:
                    raise LayoutError(f"group {name!r} index {i} outside dimension {self.dim}")
                if i in reserved:
                    raise LayoutError(f"group {name!r} overlaps goal/prev-action index {i}")
        for i, (lo, hi) in self.feature_ranges.items():
            if not 0 <= i < self.dim or lo > hi:
                raise LayoutError(f"bad declared range for feature {i}: {(lo, hi)}")

    @property
    def cells_per_slot(self) -> int:
        return self.occupancy_columns * self.occupancy_rows

    @property
    def occupancy_size(self) -> int:
        return self.cells_per_slot * self.timesteps

    @property
    def dim(self) -> int:
        return self.occupancy_size + self.goal_features + self.prev_action_features + self.extra_features

    @property
    def goal_distance_index(self) -> int:
        if not self.goal_features:
            raise LayoutError("layout has no goal block")
        return self.occupancy_size

    @property
    def goal_bearing_index(self) -> int:
        return self.goal_distance_index + 1

    @property
    def prev_action_index(self) -> int:
        if not self.prev_action_features:
            raise LayoutError("layout has no previous-action feature")
        return self.occupancy_size + self.goal_features

    def extra_index(self, k: int | str) -> int:
        if isinstance(k, str):
            k = self.extra_names.index(k)
        if not 0 <= k < self.extra_features:
            raise LayoutError(f"extra feature {k} out of range")
        return self.occupancy_size + self.goal_features + self.prev_action_features + k

    @classmethod
    def plain(cls, dim: int, **kw) -> "StateLayout":
        """Layout of ``dim`` unstructured features (no occupancy, goal or action block)."""
        return cls(occupancy_columns=0, occupancy_rows=0, row_edges=(), goal_features=0,
                   prev_action_features=0, extra_features=dim, **kw)

    def occupancy_index(self, slot: int, row: int, col: int) -> int:
        return slot * self.cells_per_slot + row * self.occupancy_columns + col

    def group(self, name: str) -> tuple[int, ...]:
        try:
            return self.named_index_groups[name]
        except KeyError:
            raise LayoutError(f"layout declares no index group {name!r}") from None

    def column_angles(self) -> np.ndarray:
        """Centre bearing of each occupancy column (radians, positive = left)."""
        width = 2 * self.fov_half_angle / self.occupancy_columns
        return -self.fov_half_angle + width * (np.arange(self.occupancy_columns) + 0.5)

    def declared_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        lo[: self.occupancy_size] = 0.0
        hi[: self.occupancy_size] = 1.0
        for i, (a, b) in self.feature_ranges.items():
            lo[i], hi[i] = a, b
        return lo, hi

    def check(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.dim:
            raise DimensionError(f"state has {s.shape[-1]} features, layout expects {self.dim}")
        return s

    def to_dict(self) -> dict:
        return {
            "occupancy_columns": self.occupancy_columns,
            "occupancy_rows": self.occupancy_rows,
            "timesteps": self.timesteps,
            "goal_features": self.goal_features,
            "prev_action_features": self.prev_action_features,
            "extra_features": self.extra_features,
            "extra_names": list(self.extra_names),
            "named_index_groups": {k: list(v) for k, v in sorted(self.named_index_groups.items())},
            "row_edges": list(self.row_edges),
            "fov_half_angle": self.fov_half_angle,
            "n_actions": self.n_actions,
            "feature_ranges": {str(k): list(v) for k, v in sorted(self.feature_ranges.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateLayout":
        d = dict(d)
        d["extra_names"] = tuple(d.get("extra_names", ()))
        d["row_edges"] = tuple(d.get("row_edges", DESK_ROW_EDGES))
        d["feature_ranges"] = {int(k): tuple(v) for k, v in d.get("feature_ranges", {}).items()}
        d["named_index_groups"] = {k: tuple(v) for k, v in d.get("named_index_groups", {}).items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise LayoutError(str(exc)) from None


def full_layout(extra_features: int = 0, **kw) -> StateLayout:
    """The 10 x 7 radial grid: 210 occupancy features + goal + previous action."""
    return StateLayout(occupancy_columns=10, occupancy_rows=7, row_edges=FULL_ROW_EDGES,
                       extra_features=extra_features, **kw)


# Angular-rate feature indices of the full-scale outdoor state as (roll, pitch) pairs,
# current timestep first. The published set lists them oldest first.
FULL_SCALE_VIBRATION_INDICES = (905, 906, 894, 895, 883, 884, 872, 873)


def full_terrain_layout() -> StateLayout:
    """Full-scale outdoor layout whose angular-rate features sit at the published indices.

    The features between the goal block and index 906 stand in for the outdoor
    perception block and are not produced by the desk-scale simulators.
    """
    extra = max(FULL_SCALE_VIBRATION_INDICES) + 1 - 213
    return full_layout(
        extra_features=extra,
        named_index_groups={"angular_velocity": FULL_SCALE_VIBRATION_INDICES},
    )


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    feature: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None
    action: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @classmethod
    def leaf(cls, node_id: int, action: int) -> "TreeNode":
        return cls(node_id, action=int(action))

    @classmethod
    def branch(cls, node_id: int, feature: int, threshold: float, left: int, right: int) -> "TreeNode":
        return cls(node_id, feature=int(feature), threshold=float(threshold), left=int(left), right=int(right))


@dataclass(frozen=True)
class NodeSubspace:
    lower: np.ndarray
    upper: np.ndarray

    def contains(self, s) -> bool:
        """Membership using the routing convention: lower bound open, upper bound closed."""
        s = np.asarray(s, dtype=float)
        return bool(np.all(s > self.lower) and np.all(s <= self.upper))

    def contains_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.all((X > self.lower) & (X <= self.upper), axis=1)

    def clipped(self, layout: StateLayout) -> "NodeSubspace":
        lo, hi = layout.declared_bounds()
        return NodeSubspace(np.maximum(self.lower, lo), np.minimum(self.upper, hi))

    def issubset(self, other: "NodeSubspace") -> bool:
        return bool(np.all(self.lower >= other.lower) and np.all(self.upper <= other.upper))


class TreeError(ConfigError):
    pass


@dataclass(frozen=True, eq=False)
class DecisionTreePolicy:
    layout: StateLayout
    actions: tuple[ActionSpec, ...]
    nodes: Mapping[int, TreeNode]
    root_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "nodes", dict(sorted((int(k), v) for k, v in self.nodes.items())))
        validate_catalog(self.actions)
        self._validate()

    def _validate(self):
        nodes = self.nodes
        if self.root_id not in nodes:
            raise TreeError(f"root {self.root_id} not among nodes")
        seen: set[int] = set()
        stack = [self.root_id]
        while stack:
            i = stack.pop()
            if i in seen:
                raise TreeError(f"node {i} reached twice; tree must be acyclic with single parents")
            seen.add(i)
            n = nodes.get(i)
            if n is None:
                raise TreeError(f"dangling child id {i}")
            if n.node_id != i:
                raise TreeError(f"node stored under {i} has id {n.node_id}")
            if n.is_leaf:
                if n.action is None or not 0 <= n.action < len(self.actions):
                    raise TreeError(f"leaf {i} has invalid action {n.action}")
                if n.left is not None or n.right is not None:
                    raise TreeError(f"leaf {i} has children")
            else:
                if n.left is None or n.right is None:
                    raise TreeError(f"branch {i} needs two children")
                if not 0 <= n.feature < self.layout.dim:
                    raise TreeError(f"branch {i} splits on feature {n.feature} outside layout")
                if not math.isfinite(n.threshold):
                    raise TreeError(f"branch {i} has non-finite threshold")
                stack.extend((n.right, n.left))
        if seen != set(nodes):
            raise TreeError(f"unreachable nodes {sorted(set(nodes) - seen)}")

    # -- cached array form -------------------------------------------------

    @cached_property
    def _arrays(self):
        size = max(self.nodes) + 1
        feature = np.full(size, -1, dtype=np.int64)
        threshold = np.zeros(size)
        left = np.full(size, -1, dtype=np.int64)
        right = np.full(size, -1, dtype=np.int64)
        action = np.full(size, -1, dtype=np.int64)
        for i, n in self.nodes.items():
            if n.is_leaf:
                action[i] = n.action
            else:
                feature[i], threshold[i], left[i], right[i] = n.feature, n.threshold, n.left, n.right
        return feature, threshold, left, right, action

    @cached_property
    def parents(self) -> dict[int, int]:
        out = {}
        for i, n in self.nodes.items():
            if not n.is_leaf:
                out[n.left] = i
                out[n.right] = i
        return out

    def node(self, node_id: int) -> TreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"no node with id {node_id}") from None

    def leaves(self) -> list[int]:
        return [i for i, n in self.nodes.items() if n.is_leaf]

    def branches(self) -> list[int]:
        return [i for i, n in self.nodes.items() if not n.is_leaf]

    def iter_preorder(self, start: int | None = None) -> Iterator[TreeNode]:
        stack = [self.root_id if start is None else start]
        while stack:
            n = self.nodes[stack.pop()]
            yield n
            if not n.is_leaf:
                stack.extend((n.right, n.left))

    def descendant_leaves(self, node_id: int) -> list[int]:
        return [n.node_id for n in self.iter_preorder(node_id) if n.is_leaf]

    def path_to(self, node_id: int) -> list[int]:
        self.node(node_id)
        path = [node_id]
        while path[-1] != self.root_id:
            path.append(self.parents[path[-1]])
        return path[::-1]

    def replace(self, nodes: Mapping[int, TreeNode]) -> "DecisionTreePolicy":
        return DecisionTreePolicy(self.layout, self.actions, nodes, self.root_id)

    def next_id(self) -> int:
        return max(self.nodes) + 1


def single_leaf(layout: StateLayout, action: int, actions=DEFAULT_ACTIONS) -> DecisionTreePolicy:
    return DecisionTreePolicy(layout, actions, {0: TreeNode.leaf(0, action)}, 0)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def leaf_id(tree: DecisionTreePolicy, s) -> int:
    s = tree.layout.check(s)
    if s.ndim != 1:
        raise DimensionError("leaf_id expects a single state; use leaf_ids for batches")
    feature, threshold, left, right, _ = tree._arrays
    i = tree.root_id
    while feature[i] >= 0:
        i = left[i] if s[feature[i]] <= threshold[i] else right[i]
    return int(i)


def leaf_ids(tree: DecisionTreePolicy, X) -> np.ndarray:
    X = np.atleast_2d(tree.layout.check(X))
    feature, threshold, left, right, _ = tree._arrays
    idx = np.full(len(X), tree.root_id, dtype=np.int64)
    rows = np.arange(len(X))
    active = feature[idx] >= 0
    while active.any():
        r = rows[active]
        cur = idx[r]
        go_left = X[r, feature[cur]] <= threshold[cur]
        idx[r] = np.where(go_left, left[cur], right[cur])
        active = feature[idx] >= 0
    return idx


def predict(tree: DecisionTreePolicy, s) -> int:
    return int(tree._arrays[4][leaf_id(tree, s)])


def predict_batch(tree: DecisionTreePolicy, X) -> np.ndarray:
    return tree._arrays[4][leaf_ids(tree, X)]


def node_subspace(tree: DecisionTreePolicy, node_id: int) -> NodeSubspace:
    """Feature box selected by the root-to-node path (unclipped)."""
    lower = np.full(tree.layout.dim, -np.inf)
    upper = np.full(tree.layout.dim, np.inf)
    path = tree.path_to(node_id)
    for parent, child in zip(path, path[1:]):
        p = tree.nodes[parent]
        if child == p.left:
            upper[p.feature] = min(upper[p.feature], p.threshold)
        else:
            lower[p.feature] = max(lower[p.feature], p.threshold)
    return NodeSubspace(lower, upper)


def tree_stats(tree: DecisionTreePolicy) -> dict[str, int]:
    depth = {tree.root_id: 0}
    leaves = 0
    for n in tree.iter_preorder():
        if n.is_leaf:
            leaves += 1
        else:
            depth[n.left] = depth[n.right] = depth[n.node_id] + 1
    return {"node_count": len(tree.nodes), "leaf_count": leaves, "depth": max(depth.values())}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt_threshold(x: float) -> str:
    return format(float(x), ".17g")


def tree_to_dict(tree: DecisionTreePolicy) -> dict:
    nodes = []
    for i, n in tree.nodes.items():
        if n.is_leaf:
            nodes.append({"id": i, "action": n.action})
        else:
            nodes.append({"id": i, "feature": n.feature, "threshold": _fmt_threshold(n.threshold),
                          "left": n.left, "right": n.right})
    return {
        "format_version": FORMAT_VERSION,
        "layout": tree.layout.to_dict(),
        "actions": [
            {"id": a.id, "linear_velocity": a.linear_velocity, "angular_velocity": a.angular_velocity}
            for a in tree.actions
        ],
        "root_id": tree.root_id,
        "nodes": nodes,
    }


def tree_from_dict(d: Mapping) -> DecisionTreePolicy:
    if d.get("format_version") != FORMAT_VERSION:
        raise TreeError(f"unsupported tree format_version {d.get('format_version')!r}")
    layout = StateLayout.from_dict(d["layout"])
    actions = tuple(ActionSpec(int(a["id"]), float(a["linear_velocity"]), float(a["angular_velocity"]))
                    for a in d["actions"])
    nodes = {}
    for n in d["nodes"]:
        if "action" in n:
            nodes[int(n["id"])] = TreeNode.leaf(n["id"], n["action"])
        else:
            nodes[int(n["id"])] = TreeNode.branch(n["id"], n["feature"], float(n["threshold"]),
                                                  n["left"], n["right"])
    return DecisionTreePolicy(layout, actions, nodes, int(d["root_id"]))


def dumps_tree(tree: DecisionTreePolicy) -> str:
    return json.dumps(tree_to_dict(tree), indent=1, sort_keys=True) + "\n"


def loads_tree(text: str) -> DecisionTreePolicy:
    try:
        return tree_from_dict(json.loads(text))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise TreeError(f"malformed tree document: {exc}") from None


def save_tree(tree: DecisionTreePolicy, path) -> Path:
    path = Path(path)
    path.write_text(dumps_tree(tree))
    return path


def load_tree(path) -> DecisionTreePolicy:
    path = Path(path)
    if not path.is_file():
        raise TreeError(f"tree file {path} not found")
    return loads_tree(path.read_text())


def trees_equal(a: DecisionTreePolicy, b: DecisionTreePolicy) -> bool:
    return dumps_tree(a) == dumps_tree(b)


def changed_nodes(before: DecisionTreePolicy, after: DecisionTreePolicy) -> tuple[set[int], set[int]]:
    """(ids present in both but different, ids only in ``after``)."""
    modified = {i for i in before.nodes if i in after.nodes and before.nodes[i] != after.nodes[i]}
    added = set(after.nodes) - set(before.nodes)
    return modified, added

