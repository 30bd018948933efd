import numpy as np
import pytest

from msviper.core import DEFAULT_ACTIONS, DecisionTreePolicy, StateLayout, TreeNode


def random_tree(rng, n_branches, layout, features=None, lo=0.0, hi=1.0, actions=None):
    """Random tree with ``n_branches`` splits; node ids in preorder."""
    features = list(range(layout.dim)) if features is None else list(features)
    actions = list(range(len(DEFAULT_ACTIONS))) if actions is None else list(actions)
    nodes = {}
    counter = [0]

    def grow(budget):
        i = counter[0]
        counter[0] += 1
        if budget == 0:
            nodes[i] = TreeNode.leaf(i, int(rng.choice(actions)))
            return i
        k = int(rng.integers(0, budget))
        f = int(rng.choice(features))
        t = float(rng.uniform(lo, hi))
        left = grow(k)
        right = grow(budget - 1 - k)
        nodes[i] = TreeNode.branch(i, f, t, left, right)
        return i

    grow(n_branches)
    return DecisionTreePolicy(layout, DEFAULT_ACTIONS, nodes, 0)


def hand_tree(layout, spec):
    """Build a tree from nested tuples: (feature, threshold, left, right) or an action int."""
    nodes = {}
    counter = [0]

    def build(x):
        i = counter[0]
        counter[0] += 1
        if isinstance(x, int):
            nodes[i] = TreeNode.leaf(i, x)
            return i
        f, t, l, r = x
        left = build(l)
        right = build(r)
        nodes[i] = TreeNode.branch(i, f, t, left, right)
        return i

    build(spec)
    return DecisionTreePolicy(layout, DEFAULT_ACTIONS, nodes, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def plain3():
    return StateLayout.plain(3)


# --- acceptance summary -------------------------------------------------------------

_criteria = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _criteria.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for r in sorted(_criteria, key=lambda r: dict(r.user_properties).get("criterion", 0)):
        props = dict(r.user_properties)
        verdict = "PASS" if r.passed else "FAIL"
        terminalreporter.write_line(f"criterion {props.get('criterion', '?'):>2}: {verdict}  {props.get('detail', r.nodeid)}")
