"""Weight penalties Psi(W): none, L1, L2 (the norm, not squared), elastic net, tree."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ParamVector

KINDS = ("none", "l1", "l2", "elastic", "tree")


class SurrogateNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    lam: float = 0.0
    alpha: float = 0.5  # elastic mix: alpha*l1 + (1-alpha)*l2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; choose from {KINDS}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def penalty(spec: RegularizerSpec, w, surrogate=None):
    """Psi(w) for a ParamVector, flat array or taped Var.  Differentiable."""
    if isinstance(w, ParamVector):
        w = w.values
    if spec.kind == "none":
        return 0.0
    if spec.kind == "l1":
        return ad.sum(ad.abs(w))
    if spec.kind == "l2":
        return ad.norm2(w)
    if spec.kind == "elastic":
        return spec.alpha * ad.sum(ad.abs(w)) + (1.0 - spec.alpha) * ad.norm2(w)
    if surrogate is None:
        raise SurrogateNotReady("surrogate not ready: fit it before using the tree penalty")
    return surrogate(w)


def penalty_value(spec: RegularizerSpec, w, surrogate=None) -> float:
    return float(np.asarray(penalty(spec, w, surrogate)))
