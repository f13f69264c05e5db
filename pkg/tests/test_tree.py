import json
import re

import numpy as np
import pytest

from treereg.tree import (BACKEND, DecisionTree, TreeConfig, average_path_length, fidelity, fit_proxy, omega,
                          prune_tree, squared_error, train_tree, tree_predict)
from treereg.tree import _pytree

from conftest import gini_root_oracle

try:
    from treereg.tree import _ctree
except ImportError:  # pragma: no cover - extension not built
    _ctree = None


def xor_data(k=10):
    """Balanced XOR: ``k`` copies of each corner of the unit square."""
    X = np.array([(a, b) for a in (0.0, 1.0) for b in (0.0, 1.0)] * k)
    y = ((X[:, 0] > 0.5) ^ (X[:, 1] > 0.5)).astype(int)
    return X, y


def test_pure_labels_give_single_leaf():
    t = train_tree(np.random.default_rng(0).random((20, 2)), np.ones(20))
    assert t.node_count == 1 and t.value[0] == 1.0


def test_threshold_split_1d():
    x = np.linspace(0, 1, 100)
    y = (x > 0.5).astype(int)
    t = train_tree(x[:, None], y, TreeConfig(min_leaf_samples=1))
    gain, f, thr = gini_root_oracle(x[:, None], y, 1)
    assert t.node_count == 3 and t.feature[0] == f and t.threshold[0] == pytest.approx(thr)
    assert abs(t.threshold[0] - 0.5) < 0.01
    assert set(t.value[t.leaves]) == {0.0, 1.0}
    assert tree_predict(t, np.array([0.2])) == pytest.approx(0.0)
    assert tree_predict(t, np.array([0.9])) == pytest.approx(1.0)


def test_xor_needs_depth_two():
    X, y = xor_data()
    t = train_tree(X, y, TreeConfig(min_leaf_samples=1))
    assert t.max_depth == 2
    assert average_path_length(t, X) == 2.0
    np.testing.assert_array_equal(t.predict(X), y)


def test_min_leaf_respected(rng):
    X = rng.random((150, 3))
    y = (rng.random(150) < 0.4).astype(int)
    t = train_tree(X, y, TreeConfig(min_leaf_samples=7))
    assert np.all(t.count[t.leaves] >= 7)


def test_empty_and_bad_labels():
    with pytest.raises(ValueError):
        train_tree(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        train_tree(np.zeros((2, 1)), np.array([0, 2]))


@pytest.mark.skipif(_ctree is None, reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(10))
def test_backends_agree(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.random((300, 4)), 2)
    y = ((X[:, 0] + 0.3 * rng.random(300)) > 0.6).astype(np.uint8)
    for ml in (1, 5):
        a, b = _pytree.build_tree(X, y, ml), _ctree.build_tree(X, y, ml)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
        t = DecisionTree(*a, n_features=4)
        ua = _pytree.apply_tree(X, t.feature, t.threshold, t.left, t.right)
        ub = _ctree.apply_tree(X, t.feature, t.threshold, t.left, t.right)
        for u, v in zip(ua, ub):
            np.testing.assert_array_equal(u, v)


def test_backend_reported():
    assert BACKEND in ("cython", "python")


# -- pruning ------------------------------------------------------------

def noisy_tree():
    """Root splits on x0 at 0.5; the right child has a noise split on x1."""
    return DecisionTree(feature=[0, -1, 1, -1, -1], threshold=[0.5, 0, 0.5, 0, 0],
                        left=[1, -1, 3, -1, -1], right=[2, -1, 4, -1, -1],
                        count=[40, 20, 20, 10, 10], npos=[19, 0, 19, 10, 9], n_features=2)


def test_prune_collapses_noise_subtree(rng):
    t = noisy_tree()
    Xv = rng.random((200, 2))
    yv = (Xv[:, 0] > 0.5).astype(float)
    pruned = prune_tree(t, Xv, yv)
    assert pruned.node_count == 3 and pruned.value[2] == pytest.approx(19 / 20)
    assert squared_error(pruned, Xv, yv) < squared_error(t, Xv, yv)


def test_prune_keeps_useful_splits():
    X, y = xor_data()
    t = train_tree(X, y, TreeConfig(min_leaf_samples=1))
    assert prune_tree(t, X, y) == t


def test_prune_single_leaf_unchanged():
    t = DecisionTree.leaf(0.3, 4)
    assert prune_tree(t, np.zeros((3, 1)), np.ones(3)) == t


def test_prune_needs_validation():
    with pytest.raises(ValueError):
        prune_tree(noisy_tree(), np.zeros((0, 2)), np.zeros(0))


def test_prune_never_hurts(rng):
    for _ in range(10):
        X = rng.random((120, 3))
        y = ((X[:, 0] > 0.4) ^ (rng.random(120) < 0.2)).astype(int)
        t = train_tree(X[:80], y[:80], TreeConfig(min_leaf_samples=1))
        p = prune_tree(t, X[80:], y[80:])
        assert squared_error(p, X[80:], y[80:]) <= squared_error(t, X[80:], y[80:])
        assert p.node_count <= t.node_count


# -- path length and omega --------------------------------------------

def test_path_length_examples(rng):
    ref = rng.random((50, 2))
    assert average_path_length(DecisionTree.leaf(0.7), ref) == 0.0
    assert tree_predict(DecisionTree.leaf(0.7), ref[0]) == 0.7
    stump = train_tree(np.array([[0.0], [1.0]]), np.array([0, 1]), TreeConfig(min_leaf_samples=1))
    assert average_path_length(stump, ref) == 1.0
    with pytest.raises(ValueError):
        average_path_length(stump, np.zeros((0, 1)))


def test_path_length_counted_per_example(rng):
    X = rng.random((200, 3))
    y = (X[:, 0] + X[:, 1] ** 2 > 0.8).astype(int)
    t = train_tree(X, y, TreeConfig(min_leaf_samples=2))
    counts = [len(p) - 1 for p in t.decision_paths(X)]
    assert average_path_length(t, X) == np.mean(counts)
    assert average_path_length(t, X[::-1]) == np.mean(counts)


def test_omega_examples(rng):
    ref = rng.random((400, 2))
    assert omega(None, lambda w, X: np.full(len(X), 0.9), ref) == 0.0
    assert omega(None, lambda w, X: (X[:, 0] > 0.5).astype(float), ref) == 1.0

    def two_outputs(w, R):
        return np.stack([(R[:, 0] > 0.5), (R[:, 0] > 0.5) ^ (R[:, 1] > 0.5)], axis=1).astype(float)

    grid = np.array([(a, b) for a in np.linspace(0.05, 0.95, 10) for b in np.linspace(0.05, 0.95, 10)])
    cfg = TreeConfig(min_leaf_samples=1, prune=False)
    per_output = (omega(None, lambda w, R: two_outputs(w, R)[:, 0], grid, cfg),
                  omega(None, lambda w, R: two_outputs(w, R)[:, 1], grid, cfg))
    assert per_output[0] == 1.0
    assert omega(None, two_outputs, grid, cfg) == per_output[0] + per_output[1]


def test_omega_thresholds_at_half_inclusive():
    ref = np.linspace(0, 1, 11)[:, None]
    val = omega(None, lambda w, X: np.where(X[:, 0] > 0.45, 0.5, 0.4999), ref, TreeConfig(min_leaf_samples=1))
    assert val == 1.0


def test_fit_proxy_deterministic(rng):
    X = rng.random((300, 2))
    y = (X[:, 1] > X[:, 0]).astype(int)
    assert fit_proxy(X, y) == fit_proxy(X, y)


# -- fidelity and export -------------------------------------------------

def test_fidelity():
    a = np.array([1, 0, 1, 1])
    assert fidelity(a, a) == 1.0
    assert fidelity(a, 1 - a) == 0.0
    with pytest.raises(ValueError):
        fidelity(a, a[:3])


def test_json_round_trip_and_dot(tmp_path):
    X, y = xor_data()
    t = train_tree(X, y, TreeConfig(min_leaf_samples=1))
    back = DecisionTree.from_json(t.to_json())
    np.testing.assert_array_equal(back.predict_proba(X), t.predict_proba(X))
    assert back.to_json() == t.to_json()
    root = json.loads(t.to_json())["root"]
    assert {"feature", "threshold", "left", "right", "prob", "count"} <= set(root)
    assert set(root["left"]["left"]) == {"prob", "count"}
    dot = t.to_dot()
    assert dot.startswith("digraph Tree {") and dot.rstrip().endswith("}")
    assert re.search(r'label="x\[\d\] <= ', dot) and "p=" in dot
    assert dot.count("->") == 2 * (t.node_count - t.leaves.size)
    assert "x1 <=" in t.to_dot(["x0", "x1"]) or "x0 <=" in t.to_dot(["x0", "x1"])


def test_root_to_leaf_paths():
    paths = noisy_tree().root_to_leaf_paths()
    assert paths == {1: [(0, "left")], 3: [(0, "right"), (2, "left")], 4: [(0, "right"), (2, "right")]}
