"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamVector


class GradientCorruptError(FloatingPointError):
    pass


@dataclass
class AdamState:
    size: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_update(state: AdamState, values: np.ndarray, g: np.ndarray) -> np.ndarray:
    """One Adam step on a raw array; advances ``state`` in place."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != values.shape or g.size != state.size:
        raise ValueError(f"gradient length {g.size} does not match parameters {values.size}")
    if not np.all(np.isfinite(g)):
        raise GradientCorruptError("gradient corrupt: contains NaN or inf")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    with np.errstate(over="ignore"):
        state.v += (1.0 - b2) * g * g
    if not np.all(np.isfinite(state.v)):
        raise FloatingPointError("second-moment estimate overflowed")
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    return values - state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)


def adam_step(state: AdamState, w: ParamVector, g) -> ParamVector:
    return w.with_values(adam_update(state, w.values, g))
