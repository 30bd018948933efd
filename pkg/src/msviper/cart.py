"""Greedy CART induction (Gini impurity, midpoint thresholds) for tree policies."""

from __future__ import annotations

import csv
import io
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DEFAULT_ACTIONS, ActionSpec, DecisionTreePolicy, StateLayout, TreeNode
from .errors import ConfigError, DimensionError, EmptyDatasetError

# Impurity decreases closer than this count as ties.
TIE_TOL = 1e-12


@dataclass
class PairSet:
    """Multiset of (state, action) pairs, optionally weighted.

    ``source`` records which scenario (index into the curriculum) produced each pair.
    """

    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None
    source: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.y) == 0:
            self.X = self.X.reshape(0, self.X.shape[-1] if self.X.size else 0)
        if len(self.X) != len(self.y):
            raise DimensionError(f"{len(self.X)} states but {len(self.y)} labels")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if len(self.weights) != len(self.y):
                raise DimensionError("weights length differs from pair count")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ConfigError("pair weights must be finite and non-negative")
        if self.source is not None:
            self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)

    @classmethod
    def empty(cls, dim: int) -> "PairSet":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PairSet(
            self.X[idx], self.y[idx],
            None if self.weights is None else self.weights[idx],
            None if self.source is None else self.source[idx],
        )

    def union(self, other: "PairSet") -> "PairSet":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self

        def cat(a, b, n_a, n_b, fill):
            if a is None and b is None:
                return None
            a = np.full(n_a, fill) if a is None else a
            b = np.full(n_b, fill) if b is None else b
            return np.concatenate([a, b])

        return PairSet(
            np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]),
            cat(self.weights, other.weights, len(self), len(other), 1.0),
            cat(self.source, other.source, len(self), len(other), -1),
        )

    def canonical_order(self) -> np.ndarray:
        keys = [self.y] + [self.X[:, j] for j in range(self.dim - 1, -1, -1)]
        if self.weights is not None:
            keys.insert(0, self.weights)
        return np.lexsort(keys)

    def canonical(self) -> "PairSet":
        return self.subset(self.canonical_order())

    # -- CSV ----------------------------------------------------------------

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = [f"f{j}" for j in range(self.dim)] + ["action"]
        if self.weights is not None:
            header.append("weight")
        w.writerow(header)
        for i in range(len(self)):
            row = [format(v, ".17g") for v in self.X[i]] + [str(int(self.y[i]))]
            if self.weights is not None:
                row.append(format(self.weights[i], ".17g"))
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def read_csv(cls, path) -> "PairSet":
        return cls.from_csv(Path(path).read_text())

    @classmethod
    def from_csv(cls, text: str) -> "PairSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ConfigError("pair file has no header")
        header = rows[0]
        has_w = header[-1] == "weight"
        d = len(header) - 1 - int(has_w)
        if header[d] != "action" or header[:d] != [f"f{j}" for j in range(d)]:
            raise ConfigError(f"unexpected pair file header {header[:3]}...")
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
        return cls(body[:, :d], body[:, d].astype(np.int64), body[:, d + 1] if has_w else None)


@dataclass
class CartConfig:
    max_depth: int | None = None
    min_samples_split: int = 2
    min_impurity_decrease: float = 0.0
    max_features: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if self.min_samples_split < 2:
            raise ConfigError("min_samples_split must be >= 2")
        if self.min_impurity_decrease < 0:
            raise ConfigError("min_impurity_decrease must be >= 0")


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    impurity_decrease: float


def _class_weights(y, w, n_classes):
    return np.bincount(y, weights=w, minlength=n_classes)


def gini(labels, weights=None) -> float:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) == 0:
        raise EmptyDatasetError("gini of an empty label set")
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        w, total = np.ones(len(labels)), float(len(labels))
    p = _class_weights(labels, w, labels.max() + 1) / total
    return float(1.0 - np.sum(p * p))


def _effective_weights(pairs: PairSet, idx) -> np.ndarray:
    if pairs.weights is None:
        return np.ones(len(idx))
    w = pairs.weights[idx]
    return w if w.sum() > 0 else np.ones(len(idx))


def _best_split_idx(X, y, w, features, n_classes, min_impurity_decrease) -> Split | None:
    total = w.sum()
    parent_counts = _class_weights(y, w, n_classes)
    parent = 1.0 - np.sum((parent_counts / total) ** 2)
    if parent <= 0.0:
        return None
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = w
    best_dec = -np.inf
    per_feature = []
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cand = np.nonzero(xs[1:] > xs[:-1])[0]
        if len(cand) == 0:
            continue
        cum = np.cumsum(onehot[order], axis=0)[cand]
        wl = cum.sum(axis=1)
        wr = total - wl
        right = parent_counts - cum
        with np.errstate(divide="ignore", invalid="ignore"):
            gl = np.where(wl > 0, 1.0 - np.sum(cum * cum, axis=1) / (wl * wl), 0.0)
            gr = np.where(wr > 0, 1.0 - np.sum(right * right, axis=1) / (wr * wr), 0.0)
        dec = parent - (wl / total) * gl - (wr / total) * gr
        lo, hi = xs[cand], xs[cand + 1]
        thr = (lo + hi) / 2.0
        thr = np.where(thr >= hi, lo, thr)
        per_feature.append((f, thr, dec))
        best_dec = max(best_dec, float(dec.max()))
    if not per_feature or best_dec < min_impurity_decrease - TIE_TOL:
        return None
    for f, thr, dec in sorted(per_feature, key=lambda t: t[0]):
        hits = np.nonzero(dec >= best_dec - TIE_TOL)[0]
        if len(hits):
            # thresholds ascend with position, so the first hit is the lowest threshold
            return Split(int(f), float(thr[hits[0]]), float(dec[hits[0]]))
    return None  # pragma: no cover


def best_split(pairs: PairSet, feature_subset: Sequence[int] | None = None,
               min_impurity_decrease: float = 0.0) -> Split | None:
    """Exhaustive Gini split search over midpoints of consecutive distinct values.

    Returns None for a pure node, when no feature varies, or when the best decrease
    falls below ``min_impurity_decrease``. Ties prefer the lower feature index, then
    the lower threshold.
    """
    if len(pairs) == 0:
        return None
    features = range(pairs.dim) if feature_subset is None else sorted(set(feature_subset))
    idx = np.arange(len(pairs))
    n_classes = int(pairs.y.max()) + 1
    return _best_split_idx(pairs.X, pairs.y, _effective_weights(pairs, idx), features,
                           n_classes, min_impurity_decrease)


def majority_label(y, w) -> int:
    return int(np.argmax(np.bincount(y, weights=w)))


def train(pairs: PairSet, cfg: CartConfig | None = None, layout: StateLayout | None = None,
          actions: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> DecisionTreePolicy:
    """Grow a tree until purity, the depth cap, the sample floor, or no qualifying split."""
    cfg = cfg or CartConfig()
    if len(pairs) == 0:
        raise EmptyDatasetError("cannot train a tree on an empty pair set")
    if layout is None:
        layout = StateLayout.plain(pairs.dim)
    if pairs.dim != layout.dim:
        raise DimensionError(f"pairs have {pairs.dim} features, layout {layout.dim}")
    if pairs.y.min() < 0 or pairs.y.max() >= len(actions):
        raise ConfigError("pair labels outside the action catalog")

    data = pairs.canonical()
    X, y = data.X, data.y
    w_all = data.weights if data.weights is not None and data.weights.sum() > 0 else np.ones(len(y))
    n_classes = len(actions)
    rng = np.random.default_rng(cfg.rng_seed)
    nodes: dict[int, TreeNode] = {}
    counter = [0]

    def grow(idx: np.ndarray, depth: int) -> int:
        node_id = counter[0]
        counter[0] += 1
        w = w_all[idx]
        yy = y[idx]
        label = majority_label(yy, w)
        stop = (
            np.all(yy == yy[0])
            or (cfg.max_depth is not None and depth >= cfg.max_depth)
            or len(idx) < cfg.min_samples_split
        )
        split = None
        if not stop:
            features = range(X.shape[1])
            if cfg.max_features is not None and cfg.max_features < X.shape[1]:
                features = rng.choice(X.shape[1], size=cfg.max_features, replace=False)
            split = _best_split_idx(X[idx], yy, w, features, n_classes, cfg.min_impurity_decrease)
        if split is None:
            nodes[node_id] = TreeNode.leaf(node_id, label)
            return node_id
        go_left = X[idx, split.feature] <= split.threshold
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        nodes[node_id] = TreeNode.branch(node_id, split.feature, split.threshold, left, right)
        return node_id

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, len(y) + 100))
    try:
        grow(np.arange(len(y)), 0)
    finally:
        sys.setrecursionlimit(limit)
    return DecisionTreePolicy(layout, tuple(actions), nodes, 0)


def accuracy(tree: DecisionTreePolicy, pairs: PairSet) -> float:
    from .core import predict_batch

    if len(pairs) == 0:
        return float("nan")
    return float(np.mean(predict_batch(tree, pairs.X) == pairs.y))
