"""Predictors: MLP, GRU, discrete HMM and the GRU-HMM residual model.

All models take padded batches ``X`` of shape ``(B, T, F)`` and return
logits of shape ``(B, T, L)``.  A feed-forward MLP is the ``T == 1`` case.
The ``logits`` methods are written against :mod:`treereg.autodiff`
primitives, so the same code runs untaped (plain arrays) and taped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp as np_logsumexp

from . import autodiff as ad
from .autodiff import ContractError
from .params import ParamVector, make_blocks

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12


class ImpossibleObservationError(ValueError):
    pass


def _uniform_init(pv: ParamVector, rng, names, scale=0.1) -> ParamVector:
    for name in names:
        blk = pv[name]
        blk[...] = rng.uniform(-scale, scale, size=blk.shape)
    return pv


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, None, :]
    elif X.ndim == 2:
        X = X[None]
    return X


class Model:
    kind = "model"
    input_dim: int
    output_dim: int

    def layout(self) -> list[tuple[str, tuple]]:
        raise NotImplementedError

    def weight_blocks(self) -> list[str]:
        raise NotImplementedError

    def init(self, rng) -> ParamVector:
        pv = ParamVector.zeros(self.layout())
        return _uniform_init(pv, rng, self.weight_blocks())

    @property
    def num_params(self) -> int:
        return sum(b.size for b in make_blocks(self.layout()))

    def logits(self, p, X):
        raise NotImplementedError

    def tree_logits(self, p, X):
        """Logits of the output node(s) that tree regularization explains."""
        return self.logits(p, X)

    def predict(self, w: ParamVector, X) -> np.ndarray:
        self._check_input(X)
        return expit(self.logits(w.as_dict(), _as_batch(X)))

    def tree_predict_proba(self, w: ParamVector, X) -> np.ndarray:
        return expit(self.tree_logits(w.as_dict(), _as_batch(X)))

    def _check_input(self, X):
        if np.shape(X)[-1] != self.input_dim:
            raise ContractError(f"input has {np.shape(X)[-1]} features, model expects {self.input_dim}")

    def descriptor(self) -> dict:
        raise NotImplementedError


class MLP(Model):
    """tanh hidden layers, sigmoid outputs."""

    kind = "mlp"

    def __init__(self, layer_sizes):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or layer_sizes[-1] < 1 or min(layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        self.layer_sizes = layer_sizes
        self.input_dim = layer_sizes[0]
        self.output_dim = layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layout(self):
        out = []
        for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            out += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        return out

    def weight_blocks(self):
        return [f"W{i}" for i in range(self.n_layers)]

    def logits(self, p, X):
        h = X
        for i in range(self.n_layers):
            h = ad.affine(h, p[f"W{i}"], p[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        return h

    def descriptor(self):
        return {"kind": self.kind, "layer_sizes": self.layer_sizes}


class GRU(Model):
    """GRU with biased gates and a per-timestep sigmoid output layer.

    Blocks: ``V`` (F, 3K) input weights for [update, reset, candidate],
    ``U`` (K, 3K) recurrent weights, ``b`` (3K,) gate biases, ``w`` (K, L)
    and ``c`` (L,) output layer.
    """

    kind = "gru"

    def __init__(self, input_dim: int, state_dim: int, output_dim: int = 1):
        if state_dim < 1 or input_dim < 1 or output_dim < 1:
            raise ValueError("GRU dimensions must be positive")
        self.input_dim = int(input_dim)
        self.state_dim = int(state_dim)
        self.output_dim = int(output_dim)

    def layout(self):
        F, K, L = self.input_dim, self.state_dim, self.output_dim
        return [("V", (F, 3 * K)), ("U", (K, 3 * K)), ("b", (3 * K,)), ("w", (K, L)), ("c", (L,))]

    def weight_blocks(self):
        return ["V", "U", "w"]

    def states(self, p, X):
        """Hidden states ``(B, T, K)`` starting from ``h_0 = 0``."""
        B, T, _ = np.shape(X)
        K = self.state_dim
        if T == 0:
            raise ContractError("empty sequence")
        xp = ad.transpose(ad.affine(X, p["V"], p["b"]), (1, 0, 2))  # (T, B, 3K)
        U = p["U"]
        U_zr, U_h = U[:, : 2 * K], U[:, 2 * K:]
        h = np.zeros((B, K))
        hs = []
        for t in range(T):
            a = xp[t]
            zr = ad.sigmoid(a[:, : 2 * K] + h @ U_zr)
            z, r = zr[:, :K], zr[:, K:]
            cand = ad.tanh(a[:, 2 * K:] + (r * h) @ U_h)
            h = h + z * (cand - h)
            hs.append(h)
        return ad.stack(hs, axis=1)

    def logits(self, p, X):
        return ad.affine(self.states(p, X), p["w"], p["c"])

    def descriptor(self):
        return {"kind": self.kind, "input_dim": self.input_dim,
                "state_dim": self.state_dim, "output_dim": self.output_dim}


@dataclass
class HmmParams:
    """Probabilities of a discrete HMM with Bernoulli features.

    ``A[i, j] = P(z_t = j | z_{t-1} = i)``; ``pi0`` is the distribution of
    the first state; ``phi[k, f] = P(x_f = 1 | z = k)``; ``out_weights``
    (K, L) map beliefs to output logits.
    """

    pi0: np.ndarray
    A: np.ndarray
    phi: np.ndarray
    out_weights: np.ndarray | None = None

    def __post_init__(self):
        self.pi0 = np.asarray(self.pi0, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        K = self.pi0.size
        if self.A.shape != (K, K) or self.phi.shape[0] != K:
            raise ValueError("inconsistent HMM dimensions")
        if not np.allclose(self.A.sum(axis=1), 1.0, atol=1e-9) or abs(self.pi0.sum() - 1) > 1e-9:
            raise ValueError("pi0 and rows of A must sum to 1")
        for arr in (self.pi0, self.A, self.phi):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError("probabilities must lie in [0, 1]")

    @property
    def num_states(self) -> int:
        return self.pi0.size


def hmm_filter(params: HmmParams, x_seq) -> np.ndarray:
    """Filtered beliefs ``P(z_t | x_1..x_t)`` as a ``(T, K)`` array."""
    x = np.asarray(x_seq, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_pi = np.log(params.pi0)
        log_A = np.log(params.A)
        log_phi, log_1m = np.log(params.phi), np.log1p(-params.phi)
        # 0 * log(0) terms must vanish, not become nan
        le = np.where(x[:, None, :] > 0, x[:, None, :] * log_phi, 0.0) + \
            np.where(x[:, None, :] < 1, (1 - x[:, None, :]) * log_1m, 0.0)
    le = le.sum(axis=2)  # (T, K)
    out = np.empty_like(le)
    la = log_pi + le[0]
    for t in range(x.shape[0]):
        if t > 0:
            la = le[t] + np_logsumexp(lb[:, None] + log_A, axis=0)
        norm = np_logsumexp(la)
        if not np.isfinite(norm):
            raise ImpossibleObservationError(f"impossible observation at t={t}")
        lb = la - norm
        out[t] = np.exp(lb)
    return out


class HMM(Model):
    """Discrete HMM trained discriminatively through the forward filter.

    Stored as unconstrained logits: ``pi`` (K,), ``A`` (K, K) row logits,
    ``phi`` (K, F) Bernoulli logits, ``u`` (K, L) belief-to-logit weights.
    """

    kind = "hmm"

    def __init__(self, input_dim: int, num_states: int, output_dim: int = 1):
        self.input_dim = int(input_dim)
        self.num_states = int(num_states)
        self.output_dim = int(output_dim)

    def layout(self):
        F, K, L = self.input_dim, self.num_states, self.output_dim
        return [("pi", (K,)), ("A", (K, K)), ("phi", (K, F)), ("u", (K, L))]

    def weight_blocks(self):
        return ["pi", "A", "phi", "u"]

    def log_beliefs(self, p, X):
        """Normalized log-space forward recursion; ``(B, T, K)``."""
        X = np.asarray(X, dtype=np.float64)
        T = X.shape[1]
        log_pi = p["pi"] - ad.logsumexp(p["pi"])
        log_A = p["A"] - ad.logsumexp(p["A"], axis=1, keepdims=True)
        log_phi = -ad.softplus(-p["phi"])
        log_1m = -ad.softplus(p["phi"])
        le = ad.transpose(X @ ad.transpose(log_phi) + (1.0 - X) @ ad.transpose(log_1m), (1, 0, 2))
        lbs = []
        la = le[0] + log_pi
        for t in range(T):
            if t > 0:
                la = le[t] + ad.logsumexp(ad.reshape(lb, lb.shape + (1,)) + log_A, axis=1)
            lb = la - ad.logsumexp(la, axis=1, keepdims=True)
            lbs.append(lb)
        return ad.stack(lbs, axis=1)

    def beliefs(self, p, X):
        return ad.exp(self.log_beliefs(p, X))

    def logits(self, p, X):
        return self.beliefs(p, X) @ p["u"]

    def params(self, w: ParamVector) -> HmmParams:
        def softmax(a, axis=-1):
            return np.exp(a - np_logsumexp(a, axis=axis, keepdims=True))
        return HmmParams(softmax(w["pi"]), softmax(w["A"], axis=1), expit(w["phi"]), w["u"].copy())

    def descriptor(self):
        return {"kind": self.kind, "input_dim": self.input_dim,
                "num_states": self.num_states, "output_dim": self.output_dim}


class GRUHMM(Model):
    """HMM belief logits plus a GRU residual: ``sigmoid(b_t @ u + g_t)``.

    Block names are the HMM's (``pi``, ``A``, ``phi``, ``u``) followed by
    the GRU's (``V``, ``U``, ``b``, ``w``, ``c``).  Tree regularization sees
    only the GRU logit ``g_t``.
    """

    kind = "gruhmm"

    def __init__(self, input_dim: int, num_states: int, state_dim: int, output_dim: int = 1):
        self.hmm = HMM(input_dim, num_states, output_dim)
        self.gru = GRU(input_dim, state_dim, output_dim)
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)

    def layout(self):
        return self.hmm.layout() + self.gru.layout()

    def weight_blocks(self):
        return self.hmm.weight_blocks() + self.gru.weight_blocks()

    def logits(self, p, X):
        return self.hmm.logits(p, X) + self.gru.logits(p, X)

    def tree_logits(self, p, X):
        return self.gru.logits(p, X)

    def split_logits(self, w: ParamVector, X):
        p = w.as_dict()
        X = _as_batch(X)
        return self.hmm.logits(p, X), self.gru.logits(p, X)

    def descriptor(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "num_states": self.hmm.num_states,
                "state_dim": self.gru.state_dim, "output_dim": self.output_dim}


def build_model(desc: dict) -> Model:
    kind = desc["kind"]
    if kind == "mlp":
        return MLP(desc["layer_sizes"])
    if kind == "gru":
        return GRU(desc["input_dim"], desc["state_dim"], desc.get("output_dim", 1))
    if kind == "hmm":
        return HMM(desc["input_dim"], desc["num_states"], desc.get("output_dim", 1))
    if kind == "gruhmm":
        return GRUHMM(desc["input_dim"], desc["num_states"], desc["state_dim"], desc.get("output_dim", 1))
    raise ValueError(f"unknown model kind {kind!r}")


# -- spec-level prediction helpers ---------------------------------------

def mlp_predict(model: MLP, w: ParamVector, x) -> np.ndarray:
    """Output probabilities for one feature vector (or a batch of rows)."""
    x = np.asarray(x, dtype=float)
    model._check_input(x)
    return expit(model.logits(w.as_dict(), x))


def gru_forward(model: GRU, w: ParamVector, x_seq):
    """``(h_seq (T, K), yhat_seq (T, L))`` for a single sequence."""
    x = np.asarray(x_seq, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("gru_forward needs a non-empty (T, F) sequence")
    model._check_input(x)
    p = w.as_dict()
    H = model.states(p, x[None])
    return H[0], expit(ad.affine(H, p["w"], p["c"]))[0]


def gruhmm_predict(model: GRUHMM, w: ParamVector, x_seq):
    """``(yhat_seq (T, L), gru_logit_seq (T, L))`` for a single sequence."""
    x = np.asarray(x_seq, dtype=float)
    model._check_input(x)
    hl, gl = model.split_logits(w, x[None])
    return expit(hl + gl)[0], gl[0]


# -- losses ----------------------------------------------------------------

def binary_cross_entropy(y, p) -> float:
    """Summed BCE of probabilities ``p``; exact 0/1 are clamped first."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        log.warning("clamping %d predictions to [%g, 1-%g]", int(np.sum((p <= 0) | (p >= 1))), PROB_CLIP, PROB_CLIP)
        p = np.clip(p, PROB_CLIP, 1 - PROB_CLIP)
    return float(-np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


def data_loss(model: Model, p, X, Y, mask, scale: float = 1.0):
    """Masked summed BCE of the model's logits (taped or not)."""
    weight = mask[..., None] * scale
    return ad.bce_logits(model.logits(p, X), Y, weight)


def model_loss(model: Model, w: ParamVector, batch, regularizer_value: float, lam: float) -> float:
    """``lam * regularizer_value + sum_n sum_t sum_l BCE(y, yhat)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X, Y, M = batch
    val = lam * float(regularizer_value) + float(data_loss(model, w.as_dict(), X, Y, M))
    if not np.isfinite(val):
        raise FloatingPointError("loss is not finite")
    return val


def save_checkpoint(model: Model, w: ParamVector, path, seed: int | None = None, extra: dict | None = None):
    meta = {"arch": dict(model.descriptor(), seed=seed)}
    if extra:
        meta.update(extra)
    return w.save(path, meta=meta)


def load_checkpoint(path) -> tuple[Model, ParamVector, dict]:
    w, meta = ParamVector.load_with_meta(path)
    return build_model(meta["arch"]), w, meta
