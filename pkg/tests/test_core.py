import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hand_tree, random_tree
from msviper.cart import PairSet, train
from msviper.core import (DEFAULT_ACTIONS, FULL_SCALE_VIBRATION_INDICES, STOP, DecisionTreePolicy,
                          StateLayout, TreeError, TreeNode, changed_nodes, dumps_tree, full_layout,
                          full_terrain_layout, leaf_id, loads_tree, node_subspace, predict,
                          predict_batch, reduced_action, single_leaf, tree_stats)
from msviper.errors import DimensionError, LayoutError


def walk(tree, s):
    """Independent traversal: follow child pointers by hand."""
    nodes = {n["id"]: n for n in json.loads(dumps_tree(tree))["nodes"]}
    n = nodes[tree.root_id]
    while "action" not in n:
        n = nodes[n["left"] if s[n["feature"]] <= float(n["threshold"]) else n["right"]]
    return n["action"]


def count_by_traversal(tree):
    stack, nodes, leaves, depth = [(tree.root_id, 0)], 0, 0, 0
    while stack:
        i, d = stack.pop()
        nodes += 1
        depth = max(depth, d)
        n = tree.nodes[i]
        if n.is_leaf:
            leaves += 1
        else:
            stack += [(n.left, d + 1), (n.right, d + 1)]
    return {"node_count": nodes, "leaf_count": leaves, "depth": depth}


# --- actions and layout ----------------------------------------------------------


def test_catalog_has_15_consecutive_actions():
    assert len(DEFAULT_ACTIONS) == 15
    assert [a.id for a in DEFAULT_ACTIONS] == list(range(15))
    assert DEFAULT_ACTIONS[STOP].linear_velocity == 0 and DEFAULT_ACTIONS[STOP].angular_velocity == 0


@pytest.mark.parametrize("a", range(15))
def test_reduced_action_never_grows_magnitudes(a):
    b = DEFAULT_ACTIONS[reduced_action(DEFAULT_ACTIONS, a)]
    assert abs(b.linear_velocity) <= abs(DEFAULT_ACTIONS[a].linear_velocity)
    assert abs(b.angular_velocity) <= abs(DEFAULT_ACTIONS[a].angular_velocity)


def test_reduced_action_examples():
    # 0.4 * (1, -1) is exactly action 13
    assert reduced_action(DEFAULT_ACTIONS, 0) == 13
    assert reduced_action(DEFAULT_ACTIONS, 2) == 6
    assert reduced_action(DEFAULT_ACTIONS, STOP) == STOP


def test_full_layout_is_213_dimensional():
    assert full_layout().dim == 213
    assert StateLayout().dim == 5 * 3 * 3 + 3


def test_full_terrain_layout_declares_published_indices():
    lay = full_terrain_layout()
    assert sorted(lay.group("angular_velocity")) == [872, 873, 883, 884, 894, 895, 905, 906]
    assert lay.group("angular_velocity") == FULL_SCALE_VIBRATION_INDICES


def test_group_index_out_of_range_rejected():
    with pytest.raises(LayoutError):
        StateLayout(named_index_groups={"g": (500,)})


def test_group_overlapping_goal_rejected():
    lay = StateLayout()
    with pytest.raises(LayoutError):
        StateLayout(named_index_groups={"g": (lay.goal_distance_index,)})


def test_layout_round_trip():
    lay = full_terrain_layout()
    assert StateLayout.from_dict(json.loads(json.dumps(lay.to_dict()))) == lay


# --- prediction ---------------------------------------------------------------------


def test_single_leaf_predicts_its_action(plain3):
    assert predict(single_leaf(plain3, 3), np.zeros(3)) == 3


def test_boundary_goes_left():
    tree = hand_tree(StateLayout.plain(1), (0, 0.5, 2, 6))
    assert predict(tree, [0.5]) == 2
    assert predict(tree, [np.nextafter(0.5, 1)]) == 6


def test_dimension_mismatch(plain3):
    with pytest.raises(DimensionError):
        predict(single_leaf(plain3, 0), np.zeros(4))


def test_predict_matches_path_walk(rng):
    lay = StateLayout.plain(5)
    tree = random_tree(rng, 15, lay)
    assert tree_stats(tree)["node_count"] == 31
    X = rng.uniform(-0.2, 1.2, size=(1000, 5))
    expected = [walk(tree, s) for s in X]
    assert list(predict_batch(tree, X)) == expected
    assert [predict(tree, s) for s in X] == expected


# --- subspaces ----------------------------------------------------------------------


def test_root_subspace_unbounded(plain3):
    sub = node_subspace(single_leaf(plain3, 0), 0)
    assert np.all(np.isneginf(sub.lower)) and np.all(np.isposinf(sub.upper))


def test_two_split_chain():
    # node ids: 0 root, 1 its left branch, 2 = leaf, 3 = target leaf, 4 = leaf
    tree = hand_tree(StateLayout.plain(2), (0, 0.4, (0, 0.1, 1, 2), 3))
    sub = node_subspace(tree, 3)
    assert sub.lower[0] == 0.1 and sub.upper[0] == 0.4
    assert np.isneginf(sub.lower[1]) and np.isposinf(sub.upper[1])


def test_unknown_node_id(plain3):
    with pytest.raises(KeyError):
        node_subspace(single_leaf(plain3, 0), 7)


def test_leaf_boxes_route_like_predict(rng):
    lay = StateLayout.plain(4)
    tree = random_tree(rng, 20, lay)
    X = rng.uniform(0, 1, size=(10_000, 4))
    leaves = np.array([leaf_id(tree, s) for s in X])
    for l in tree.leaves():
        sub = node_subspace(tree, l)
        inside = np.all((X > sub.lower) & (X <= sub.upper), axis=1)
        assert np.array_equal(inside, leaves == l)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 25))
def test_partition_and_nesting(seed, n):
    rng = np.random.default_rng(seed)
    lay = StateLayout.plain(3)
    tree = random_tree(rng, n, lay)
    X = rng.uniform(-0.5, 1.5, size=(200, 3))
    counts = np.zeros(len(X), dtype=int)
    for l in tree.leaves():
        counts += node_subspace(tree, l).contains_batch(X)
    assert np.all(counts == 1)
    for i in tree.branches():
        parent = node_subspace(tree, i)
        for c in (tree.nodes[i].left, tree.nodes[i].right):
            assert node_subspace(tree, c).issubset(parent)


# --- stats and serialization ----------------------------------------------------------


def test_stats_single_leaf(plain3):
    assert tree_stats(single_leaf(plain3, 1)) == {"node_count": 1, "leaf_count": 1, "depth": 0}


def test_stats_full_depth_two():
    tree = hand_tree(StateLayout.plain(2), (0, 0.5, (1, 0.5, 0, 1), (1, 0.5, 2, 4)))
    assert tree_stats(tree) == {"node_count": 7, "leaf_count": 4, "depth": 2}


def test_stats_of_trained_tree_match_traversal(rng):
    X = rng.uniform(size=(300, 4))
    y = (X[:, 0] > 0.3).astype(int) + 2 * (X[:, 2] > 0.6)
    tree = train(PairSet(X, y))
    assert tree_stats(tree) == count_by_traversal(tree)


def test_serialization_is_bit_exact(rng):
    tree = random_tree(rng, 30, StateLayout.plain(4), lo=-1e3, hi=1e3)
    text = dumps_tree(tree)
    back = loads_tree(text)
    assert dumps_tree(back) == text
    for i, n in tree.nodes.items():
        assert back.nodes[i] == n


def test_preorder_ids(rng):
    tree = random_tree(rng, 10, StateLayout.plain(2))
    assert [n.node_id for n in tree.iter_preorder()] == sorted(tree.nodes)


def test_malformed_document():
    with pytest.raises(TreeError):
        loads_tree('{"nodes": 3}')


def test_cycle_rejected(plain3):
    nodes = {0: TreeNode.branch(0, 0, 0.0, 1, 0), 1: TreeNode.leaf(1, 0)}
    with pytest.raises(TreeError):
        DecisionTreePolicy(plain3, DEFAULT_ACTIONS, nodes, 0)


def test_bad_leaf_action(plain3):
    with pytest.raises(TreeError):
        DecisionTreePolicy(plain3, DEFAULT_ACTIONS, {0: TreeNode.leaf(0, 99)}, 0)


def test_changed_nodes(rng):
    tree = random_tree(rng, 5, StateLayout.plain(2))
    leaf = tree.leaves()[0]
    new = tree.replace({**tree.nodes, leaf: TreeNode.leaf(leaf, (tree.nodes[leaf].action + 1) % 15)})
    assert changed_nodes(tree, new) == ({leaf}, set())
    assert math.isfinite(tree.nodes[tree.root_id].threshold)
