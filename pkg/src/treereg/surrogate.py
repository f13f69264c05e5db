"""Differentiable stand-in for the average-path-length cost.

A one-hidden-layer MLP maps a flattened parameter vector ``W`` to an
estimate of ``Omega(W)``.  It is refit from time to time on pairs
``(W_j, Omega(W_j))`` collected while the target model trains.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_update
from .params import ParamVector

log = logging.getLogger(__name__)


class InsufficientSurrogateData(ValueError):
    pass


@dataclass
class SurrogateSample:
    w_flat: np.ndarray
    omega_true: float
    epoch_tag: int = 0

    def __post_init__(self):
        self.w_flat = np.asarray(self.w_flat, dtype=np.float64).reshape(-1)
        self.omega_true = float(self.omega_true)
        if not self.omega_true >= 0:
            raise ValueError(f"omega_true must be >= 0, got {self.omega_true}")
        if not np.all(np.isfinite(self.w_flat)):
            raise ValueError("w_flat must be finite")


@dataclass
class SurrogateConfig:
    hidden_units: int = 25
    epsilon: float = 1e-4
    window_E: int = 50
    retrain_every: int = 25
    J: int = 50
    augment_count: int = 0
    restarts: int = 0
    epochs: int = 1000
    learning_rate: float = 0.01
    perturb_scale: float = 0.5
    fresh_fraction: float = 0.2
    warm_start: bool = False
    sample_every: str = "epoch"
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_units", "window_E", "retrain_every", "J", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("augment_count", "restarts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon <= 0 or self.learning_rate <= 0:
            raise ValueError("epsilon and learning_rate must be positive")
        if self.sample_every not in ("epoch", "batch"):
            raise ValueError("sample_every must be 'epoch' or 'batch'")
        if self.window_E < self.retrain_every:
            warnings.warn("window_E < retrain_every: some samples are never used", stacklevel=2)


# -- sample assembly -----------------------------------------------------

def collect_sample(w: ParamVector, omega_fn: Callable[[ParamVector], float], epoch: int) -> SurrogateSample:
    return SurrogateSample(w.values.copy(), omega_fn(w), int(epoch))


def perturb(base_w: ParamVector, count: int, rng, scale: float = 0.5, fresh_fraction: float = 0.2) -> list[ParamVector]:
    """Gaussian jitter per block (std ``scale*std(block) + 0.01``); a fraction drawn fresh from U(-0.5, 0.5)."""
    out = []
    for _ in range(count):
        if rng.random() < fresh_fraction:
            vals = rng.uniform(-0.5, 0.5, size=len(base_w))
        else:
            vals = base_w.values.copy()
            for blk in base_w.blocks:
                seg = vals[blk.slice]
                seg += rng.normal(0.0, scale * np.std(seg) + 0.01, size=seg.shape) if scale > 0 else 0.0
        out.append(base_w.with_values(vals))
    return out


def augment(base_w: ParamVector, count: int, rng, omega_fn: Callable[[ParamVector], float], epoch: int = 0,
            scale: float = 0.5, fresh_fraction: float = 0.2) -> list[SurrogateSample]:
    if count < 0:
        raise ValueError("count must be >= 0")
    return [collect_sample(w, omega_fn, epoch) for w in perturb(base_w, count, rng, scale, fresh_fraction)]


def restart_samples(train_fn: Callable[[int], ParamVector], restarts: int, omega_fn, seeds=None,
                    epoch: int = 0) -> list[SurrogateSample]:
    """One sample per unregularized run ``train_fn(seed)``."""
    if restarts < 0:
        raise ValueError("restarts must be >= 0")
    seeds = list(range(restarts)) if seeds is None else list(seeds)[:restarts]
    return [collect_sample(train_fn(s), omega_fn, epoch) for s in seeds]


def window(samples: list[SurrogateSample], epoch: int, window_E: int) -> list[SurrogateSample]:
    """Samples tagged within the last ``window_E`` epochs (inclusive of ``epoch``)."""
    return [s for s in samples if epoch - window_E < s.epoch_tag <= epoch]


# -- the surrogate network -------------------------------------------------

@dataclass
class Surrogate:
    """Fitted network plus the fixed input standardization."""

    xi: ParamVector
    mu: np.ndarray
    sigma: np.ndarray
    history: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.mu.size

    def _check(self, n):
        if n != self.input_dim:
            raise ad.ContractError(f"surrogate expects {self.input_dim} parameters, got {n}")

    def __call__(self, w):
        """Differentiable estimate; ``w`` may be an array or a taped Var of shape (P,)."""
        self._check(np.shape(ad._val(w))[-1])
        return _net(self.xi.as_dict(), (w - self.mu) / self.sigma)

    def predict(self, W) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        self._check(W.shape[1])
        return _net(self.xi.as_dict(), (W - self.mu) / self.sigma)

    def save(self, path, meta: dict | None = None):
        meta = dict(meta or {})
        meta["surrogate"] = {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}
        return self.xi.save(path, meta=meta)

    @classmethod
    def load(cls, path) -> "Surrogate":
        xi, meta = ParamVector.load_with_meta(path)
        s = meta["surrogate"]
        return cls(xi, np.array(s["mu"]), np.array(s["sigma"]))


def _layout(P: int, H: int):
    return [("W0", (P, H)), ("b0", (H,)), ("W1", (H, 1)), ("b1", (1,))]


def _net(p, Z):
    h = ad.tanh(ad.affine(Z, p["W0"], p["b0"]))
    out = ad.softplus(ad.affine(h, p["W1"], p["b1"]))
    return out[..., 0]


def _objective(p, Z, y, eps):
    r = _net(p, Z) - y
    ridge = 0.0
    for name in ("W0", "b0", "W1", "b1"):
        ridge = ridge + ad.sum(p[name] * p[name])
    return ad.sum(r * r) + eps * ridge


def fit_surrogate(samples: list[SurrogateSample], config: SurrogateConfig = SurrogateConfig(), rng=None,
                  init: Surrogate | None = None) -> Surrogate:
    """Adam on ``sum_j (Omega_j - net(W_j))^2 + eps * ||xi||^2``."""
    if len(samples) < 2:
        raise InsufficientSurrogateData(f"insufficient surrogate data: {len(samples)} sample(s), need >= 2")
    W = np.stack([s.w_flat for s in samples])
    y = np.array([s.omega_true for s in samples])
    rng = np.random.default_rng(config.seed) if rng is None else rng
    mu = W.mean(axis=0)
    # one scale for all coordinates: per-coordinate scaling blows up
    # directions the window barely explored and saturates the tanh layer
    sigma = np.full(W.shape[1], (float(np.std(W - mu)) + 1e-8) * np.sqrt(W.shape[1]))
    Z = (W - mu) / sigma
    P, H = W.shape[1], config.hidden_units
    if init is not None and init.xi.values.size == _size(P, H):
        xi = init.xi.copy()
    else:
        xi = ParamVector.zeros(_layout(P, H))
        xi["W0"][...] = rng.normal(0.0, 1.0 / np.sqrt(P), size=(P, H))
        xi["W1"][...] = rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, 1))
        # start the softplus head near the sample mean
        xi["b1"][...] = np.log(np.expm1(max(y.mean(), 1e-3)))
    state = AdamState(len(xi), learning_rate=config.learning_rate)
    history = []
    best, best_loss = xi, np.inf
    for epoch in range(config.epochs + 1):
        if epoch < config.epochs:
            loss, g = ad.value_and_grad(_objective, xi, Z, y, config.epsilon)
        else:
            loss = float(ad.evaluate(_objective, xi, Z, y, config.epsilon))
        if epoch == 0 or epoch % max(config.epochs // 10, 1) == 0 or epoch == config.epochs:
            history.append((epoch, loss))
        if loss < best_loss:
            best, best_loss = xi, loss
        if epoch < config.epochs:
            xi = xi.with_values(adam_update(state, xi.values, g))
    # Adam can overshoot near the end; keep the best iterate seen
    return Surrogate(best, mu, sigma, history)


def _size(P, H):
    return P * H + H + H + 1


def surrogate_penalty(surrogate: Surrogate, w) -> float:
    """Scalar estimate of Omega for ``w`` (ParamVector, array or taped Var)."""
    if isinstance(w, ParamVector):
        w = w.values
    return surrogate(w)


# -- persistence of the sample buffer --------------------------------------

def save_samples(samples: list[SurrogateSample], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for s in samples:
            wr.writerow([s.epoch_tag, repr(s.omega_true)] + [repr(float(v)) for v in s.w_flat])
    return path


def load_samples(path) -> list[SurrogateSample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                out.append(SurrogateSample(np.array([float(v) for v in row[2:]]), float(row[1]), int(row[0])))
    return out
