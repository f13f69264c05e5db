"""Decision-tree distillation, pruning and the average-path-length cost."""

from ._kernels import BACKEND
from .core import (
    DecisionTree,
    TreeConfig,
    average_path_length,
    fidelity,
    fit_proxy,
    omega,
    prune_tree,
    squared_error,
    train_tree,
    tree_predict,
)

__all__ = [
    "BACKEND", "DecisionTree", "TreeConfig", "average_path_length", "fidelity", "fit_proxy",
    "omega", "prune_tree", "squared_error", "train_tree", "tree_predict",
]
