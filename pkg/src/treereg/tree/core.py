"""Binary decision trees with probabilistic leaves.

Trees are stored as flat arrays in the sklearn style: node ``i`` is a leaf
when ``feature[i] < 0``; otherwise rows with ``x[feature[i]] <= threshold[i]``
go to ``left[i]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class TreeConfig:
    min_leaf_samples: int = 5
    prune: bool = True
    valid_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.min_leaf_samples < 1:
            raise ValueError("min_leaf_samples must be >= 1")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ValueError("valid_fraction must lie in (0, 1)")


class DecisionTree:
    def __init__(self, feature, threshold, left, right, count, npos, value=None, n_features=None):
        self.feature = np.asarray(feature, dtype=np.intp)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.intp)
        self.right = np.asarray(right, dtype=np.intp)
        self.count = np.asarray(count, dtype=np.intp)
        self.npos = np.asarray(npos, dtype=np.intp)
        if value is None:
            with np.errstate(invalid="ignore", divide="ignore"):
                value = np.where(self.count > 0, self.npos / np.maximum(self.count, 1), 0.0)
        self.value = np.asarray(value, dtype=np.float64)
        used = self.feature[self.feature >= 0]
        self.n_features = int(n_features if n_features is not None else (used.max() + 1 if used.size else 0))
        self._validate()

    def _validate(self):
        n = self.node_count
        for arr in (self.threshold, self.left, self.right, self.count, self.npos, self.value):
            if arr.shape != (n,):
                raise ValueError("tree arrays must share one length")
        internal = self.feature >= 0
        if np.any(internal & ((self.left <= 0) | (self.right <= 0))):
            raise ValueError("internal node without two children")
        if np.any((self.value < 0) | (self.value > 1)):
            raise ValueError("leaf probabilities must lie in [0, 1]")
        if np.any(self.feature >= self.n_features):
            raise ValueError("feature index out of range")

    @classmethod
    def leaf(cls, prob: float, count: int = 0) -> "DecisionTree":
        return cls([-1], [0.0], [-1], [-1], [count], [round(prob * count)], value=[prob])

    @property
    def node_count(self) -> int:
        return self.feature.size

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def node_depths(self) -> np.ndarray:
        depth = np.zeros(self.node_count, dtype=np.intp)
        for i in range(self.node_count):  # children always follow parents
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return depth

    def parents(self) -> np.ndarray:
        par = np.full(self.node_count, -1, dtype=np.intp)
        internal = np.flatnonzero(self.feature >= 0)
        par[self.left[internal]] = internal
        par[self.right[internal]] = internal
        return par

    @property
    def max_depth(self) -> int:
        return int(self.node_depths()[self.leaves].max())

    def _X(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] < self.n_features:
            raise ValueError(f"tree uses {self.n_features} features, input has {X.shape[1]}")
        return X

    def apply(self, X) -> tuple[np.ndarray, np.ndarray]:
        """``(leaf index, number of decisions)`` per row."""
        return _kernels.apply_tree(self._X(X), self.feature, self.threshold, self.left, self.right)

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(X)[0]]

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int8)

    def path_lengths(self, X) -> np.ndarray:
        return self.apply(X)[1]

    def decision_paths(self, X) -> list[list[int]]:
        """Node ids visited by each row, root first, leaf last."""
        X = self._X(X)
        out = []
        for x in X:
            node, path = 0, [0]
            while self.feature[node] >= 0:
                node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
                path.append(int(node))
            out.append(path)
        return out

    def root_to_leaf_paths(self) -> dict[int, list[tuple[int, str]]]:
        """Map leaf id -> [(internal node, 'left'|'right'), ...] from the root."""
        paths = {0: []}
        out = {}
        for i in range(self.node_count):
            if i not in paths:
                continue
            if self.feature[i] < 0:
                out[i] = paths[i]
            else:
                paths[self.left[i]] = paths[i] + [(i, "left")]
                paths[self.right[i]] = paths[i] + [(i, "right")]
        return out

    def copy(self) -> "DecisionTree":
        return DecisionTree(self.feature.copy(), self.threshold.copy(), self.left.copy(), self.right.copy(),
                            self.count.copy(), self.npos.copy(), self.value.copy(), self.n_features)

    def __eq__(self, other):
        if not isinstance(other, DecisionTree):
            return NotImplemented
        return all(np.array_equal(getattr(self, a), getattr(other, a))
                   for a in ("feature", "threshold", "left", "right", "count", "npos", "value"))

    def __repr__(self):
        return f"DecisionTree(nodes={self.node_count}, leaves={self.leaves.size})"

    # -- export ---------------------------------------------------------
    def to_dict(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"prob": float(self.value[node]), "count": int(self.count[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "count": int(self.count[node]),
            "prob": float(self.value[node]),
            "left": self.to_dict(int(self.left[node])),
            "right": self.to_dict(int(self.right[node])),
        }

    def to_json(self) -> str:
        return json.dumps({"n_features": self.n_features, "root": self.to_dict()}, indent=2)

    @classmethod
    def from_dict(cls, d: dict, n_features: int | None = None) -> "DecisionTree":
        rows: list[list] = []

        def walk(nd):
            i = len(rows)
            rows.append([-1, 0.0, -1, -1, int(nd.get("count", 0)), float(nd["prob"])])
            if "feature" in nd:
                rows[i][0] = int(nd["feature"])
                rows[i][1] = float(nd["threshold"])
                rows[i][2] = walk(nd["left"])
                rows[i][3] = walk(nd["right"])
            return i

        walk(d)
        f, t, l, r, c, v = (list(col) for col in zip(*rows))
        npos = [round(vi * ci) for vi, ci in zip(v, c)]
        return cls(f, t, l, r, c, npos, value=v, n_features=n_features)

    @classmethod
    def from_json(cls, text: str) -> "DecisionTree":
        d = json.loads(text)
        return cls.from_dict(d["root"], d.get("n_features"))

    def to_dot(self, feature_names=None) -> str:
        def fname(f):
            return feature_names[f] if feature_names is not None else f"x[{f}]"

        lines = ["digraph Tree {", 'node [shape=box, fontname="helvetica"];']
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                label = f"{fname(self.feature[i])} <= {self.threshold[i]:.6g}"
            else:
                label = f"p={self.value[i]:.4f}"
            lines.append(f'{i} [label="{label}\\nsamples={self.count[i]}"];')
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                lines.append(f'{i} -> {self.left[i]} [label="True"];')
                lines.append(f'{i} -> {self.right[i]} [label="False"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def _labels(y) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("tree labels must be 0 or 1")
    return y.astype(np.uint8)


def train_tree(X, y, config: TreeConfig = TreeConfig()) -> DecisionTree:
    """Greedy Gini CART on binary labels; midpoint thresholds."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = _labels(y)
    if X.shape[0] == 0:
        raise ValueError("cannot train a tree on an empty example set")
    if X.shape[0] != y.size:
        raise ValueError("X and y lengths differ")
    arrays = _kernels.build_tree(X, y, int(config.min_leaf_samples))
    return DecisionTree(*arrays, n_features=X.shape[1])


def squared_error(tree: DecisionTree, X, y) -> float:
    return float(np.sum((tree.predict_proba(X) - np.asarray(y, dtype=float).reshape(-1)) ** 2))


def prune_tree(tree: DecisionTree, X_valid, y_valid) -> DecisionTree:
    """Reduced-error post-pruning on validation squared error.

    Internal nodes are visited deepest first; collapsing a node into a leaf
    (with its training positive fraction) is kept when it strictly lowers
    the validation error.
    """
    X_valid = tree._X(X_valid)
    y_valid = np.asarray(y_valid, dtype=float).reshape(-1)
    if X_valid.shape[0] == 0:
        raise ValueError("validation set must be non-empty")
    if tree.node_count == 1:
        return tree.copy()

    members: dict[int, list[int]] = {}
    for r, path in enumerate(tree.decision_paths(X_valid)):
        for node in path[:-1]:
            members.setdefault(node, []).append(r)
    pred = tree.predict_proba(X_valid)

    depth = tree.node_depths()
    internal = np.flatnonzero(tree.feature >= 0)
    order = sorted(internal, key=lambda i: (-depth[i], i))
    feature = tree.feature.copy()
    parents = tree.parents()
    for n in order:
        a, dead = parents[n], False
        while a >= 0:
            if feature[a] < 0:
                dead = True
                break
            a = parents[a]
        if dead:
            continue
        idx = members.get(n)
        if not idx:
            continue
        idx = np.asarray(idx)
        old = np.sum((pred[idx] - y_valid[idx]) ** 2)
        new = np.sum((tree.value[n] - y_valid[idx]) ** 2)
        if new < old:
            feature[n] = -1
            pred[idx] = tree.value[n]
    # drop nodes below collapsed ones, keep relative order of survivors
    keep = np.zeros(tree.node_count, dtype=bool)
    keep[0] = True
    for i in range(tree.node_count):
        if keep[i] and feature[i] >= 0:
            keep[tree.left[i]] = keep[tree.right[i]] = True
    new_id = np.cumsum(keep) - 1
    old_ids = np.flatnonzero(keep)
    f = feature[old_ids]
    internal_new = f >= 0
    left = np.where(internal_new, new_id[np.maximum(tree.left[old_ids], 0)], -1)
    right = np.where(internal_new, new_id[np.maximum(tree.right[old_ids], 0)], -1)
    thr = np.where(internal_new, tree.threshold[old_ids], 0.0)
    return DecisionTree(f, thr, left, right, tree.count[old_ids], tree.npos[old_ids],
                        tree.value[old_ids], tree.n_features)


def tree_predict(tree: DecisionTree, x) -> float | np.ndarray:
    p = tree.predict_proba(x)
    return float(p[0]) if np.ndim(x) == 1 else p


def average_path_length(tree: DecisionTree, reference) -> float:
    """Mean number of decision nodes traversed over ``reference``."""
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim == 1:
        reference = reference[:, None]
    if reference.shape[0] == 0:
        raise ValueError("reference set must be non-empty")
    return float(np.mean(tree.path_lengths(reference)))


def fit_proxy(X, labels, config: TreeConfig = TreeConfig(), X_valid=None, y_valid=None) -> DecisionTree:
    """Train and (optionally) prune a tree on binary labels.

    Without an explicit validation set the data are split by a seeded
    shuffle into train and validation parts.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    labels = _labels(labels)
    if not config.prune:
        return train_tree(X, labels, config)
    if X_valid is None:
        n = X.shape[0]
        perm = np.random.default_rng(config.seed).permutation(n)
        n_val = int(round(config.valid_fraction * n))
        if n_val == 0 or n_val == n:
            return train_tree(X, labels, config)
        va, tr = perm[:n_val], perm[n_val:]
        X_valid, y_valid, X, labels = X[va], labels[va], X[tr], labels[tr]
    tree = train_tree(X, labels, config)
    return prune_tree(tree, X_valid, y_valid)


def omega(w, predict, reference, config: TreeConfig = TreeConfig()) -> float:
    """True average-path-length cost of the model ``predict(w, reference)``.

    ``predict`` returns probabilities of shape ``(N,)`` or ``(N, L)``.  Each
    output is thresholded at 0.5, distilled into a (pruned) tree, and the
    path lengths over the whole reference set are summed across outputs.
    """
    reference = np.ascontiguousarray(reference, dtype=np.float64)
    if reference.shape[0] == 0:
        raise ValueError("reference set must be non-empty")
    probs = np.asarray(predict(w, reference), dtype=float)
    if probs.ndim == 1:
        probs = probs[:, None]
    total = 0.0
    for j in range(probs.shape[1]):
        labels = (probs[:, j] >= 0.5).astype(np.uint8)
        total += average_path_length(fit_proxy(reference, labels, config), reference)
    return total


def fidelity(model_predictions, tree_predictions) -> float:
    """Fraction of examples where the two thresholded predictions agree."""
    a = np.asarray(model_predictions, dtype=float).reshape(-1)
    b = np.asarray(tree_predictions, dtype=float).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("fidelity of empty arrays is undefined")
    return float(np.mean((a >= 0.5) == (b >= 0.5)))
