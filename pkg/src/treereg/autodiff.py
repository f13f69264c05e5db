"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive here accepts either plain arrays or :class:`Var` values.
With plain arrays it just computes the result, so a model written against
these functions runs untaped for prediction and taped for training.

    value, tape = forward_record(f, w, X, y)
    grad = backward(tape)          # d value / d w.values
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp as _np_logsumexp

from .params import ParamVector


class NumericOverflowError(ArithmeticError):
    """A recorded operation produced a non-finite value."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple[int, ...], vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Nodes in creation order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.output: int | None = None
        self.adjoints: list | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        return self._push("leaf", (), np.asarray(value, dtype=np.float64), None)

    def _push(self, op, parents, value, vjp) -> "Var":
        idx = len(self.nodes)
        self.nodes.append(Node(op, parents, vjp))
        self.values.append(value)
        return Var(self, idx, value)

    def replay(self) -> np.ndarray:
        """Value of the recorded output."""
        return self.values[self.output]


class Var:
    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, k): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _record(op: str, value, parents: tuple[Var, ...], vjp) -> Var:
    tape = parents[0].tape
    for p in parents[1:]:
        if p.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(f"numeric overflow at node {len(tape.nodes)} ({op})")
    return tape._push(op, tuple(p.index for p in parents), value, vjp)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(op, a, b, out, ga, gb):
    va, vb = isinstance(a, Var), isinstance(b, Var)
    if va and vb:
        return _record(op, out, (a, b), lambda g: (ga(g), gb(g)))
    if va:
        return _record(op, out, (a,), lambda g: (ga(g),))
    if vb:
        return _record(op, out, (b,), lambda g: (gb(g),))
    return out


def _unary(op, x, out, gx):
    if isinstance(x, Var):
        return _record(op, out, (x,), lambda g: (gx(g),))
    return out


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary("add", a, b, np.add(av, bv),
                   lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb))


def sub(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary("sub", a, b, np.subtract(av, bv),
                   lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb))


def mul(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary("mul", a, b, np.multiply(av, bv),
                   lambda g: _unbroadcast(g * bv, sa), lambda g: _unbroadcast(g * av, sb))


def div(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary("div", a, b, np.divide(av, bv),
                   lambda g: _unbroadcast(g / bv, sa),
                   lambda g: _unbroadcast(-g * av / (bv * bv), sb))


def neg(x):
    return _unary("neg", x, -_val(x), lambda g: -g)


def power(x, k: float):
    xv = _val(x)
    return _unary("pow", x, xv ** k, lambda g: g * k * xv ** (k - 1))


def square(x):
    xv = _val(x)
    return _unary("square", x, xv * xv, lambda g: 2.0 * g * xv)


def maximum(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    pick_a = av >= bv  # ties go to the first operand
    return _binary("max", a, b, np.maximum(av, bv),
                   lambda g: _unbroadcast(g * pick_a, sa),
                   lambda g: _unbroadcast(g * ~pick_a, sb))


# -- nonlinearities --------------------------------------------------------

def tanh(x):
    y = np.tanh(_val(x))
    return _unary("tanh", x, y, lambda g: g * (1.0 - y * y))


def sigmoid(x):
    y = expit(_val(x))
    return _unary("sigmoid", x, y, lambda g: g * y * (1.0 - y))


def exp(x):
    with np.errstate(over="ignore"):  # overflow is reported by _record
        y = np.exp(_val(x))
    return _unary("exp", x, y, lambda g: g * y)


def log(x):
    xv = _val(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xv)
    return _unary("log", x, y, lambda g: g / xv)


def softplus(x):
    xv = _val(x)
    return _unary("softplus", x, np.logaddexp(0.0, xv), lambda g: g * expit(xv))


def abs(x):  # noqa: A001 - mirrors numpy naming
    xv = _val(x)
    return _unary("abs", x, np.abs(xv), lambda g: g * np.sign(xv))


def sqrt(x):
    xv = _val(x)
    y = np.sqrt(xv)
    return _unary("sqrt", x, y, lambda g: 0.5 * g / y)


# -- reductions ------------------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001
    xv = _val(x)
    shape = np.shape(xv)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def gx(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", x, out, gx)


def mean(x, axis=None, keepdims=False):
    n = np.size(_val(x)) if axis is None else np.shape(_val(x))[axis]
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(x, axis=None, keepdims=False):
    xv = _val(x)
    out = _np_logsumexp(xv, axis=axis, keepdims=True)

    def gx(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g * np.exp(xv - out)

    res = out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()))
    return _unary("logsumexp", x, res, gx)


def norm2(x):
    """Euclidean norm of all entries; gradient at the origin is zero."""
    xv = _val(x)
    n = float(np.sqrt(np.sum(xv * xv)))
    return _unary("norm2", x, np.asarray(n), lambda g: g * xv / n if n > 0 else np.zeros_like(xv))


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """``a @ b`` where ``b`` is 1-D or 2-D and ``a`` has any leading dims."""
    av, bv = _val(a), _val(b)
    out = np.matmul(av, bv)
    if bv.ndim > 2:
        raise ContractError("matmul: right operand must be 1-D or 2-D")
    sa = np.shape(av)

    if bv.ndim == 1:
        def ga(g):
            return np.multiply.outer(g, bv) if av.ndim > 1 else g * bv

        def gb(g):
            return av.reshape(-1, bv.shape[0]).T @ np.reshape(g, -1)
    elif av.ndim == 1:
        def ga(g):
            return bv @ g

        def gb(g):
            return np.outer(av, g)
    else:
        def ga(g):
            return g @ bv.T

        def gb(g):
            return av.reshape(-1, sa[-1]).T @ g.reshape(-1, bv.shape[1])

    return _binary("matmul", a, b, out, ga, gb)


def affine(x, W, b):
    return add(matmul(x, W), b)


# -- shape manipulation ----------------------------------------------------

def getitem(x, idx):
    xv = _val(x)
    shape = np.shape(xv)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def gx(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(z, idx, g)
        return z

    return _unary("getitem", x, xv[idx], gx)


def reshape(x, shape):
    xv = _val(x)
    old = np.shape(xv)
    return _unary("reshape", x, np.reshape(xv, shape), lambda g: np.reshape(g, old))


def transpose(x, axes=None):
    xv = _val(x)
    inv = None if axes is None else np.argsort(axes)
    return _unary("transpose", x, np.transpose(xv, axes), lambda g: np.transpose(g, inv))


def stack(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    vars_ = [(i, x) for i, x in enumerate(xs) if isinstance(x, Var)]
    if not vars_:
        return out
    return _record("stack", out, tuple(x for _, x in vars_),
                   lambda g: tuple(np.take(g, i, axis=axis) for i, _ in vars_))


def concatenate(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [np.shape(v)[axis] for v in vals])
    vars_ = [(i, x) for i, x in enumerate(xs) if isinstance(x, Var)]
    if not vars_:
        return out

    def vjp(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i, _ in vars_)

    return _record("concat", out, tuple(x for _, x in vars_), vjp)


# -- fused losses ----------------------------------------------------------

def bce_logits(z, y, weight=None):
    """Sum of binary cross-entropy between labels ``y`` and ``sigmoid(z)``.

    Computed as ``softplus(z) - y*z``, which never takes log of 0 or 1.
    ``weight`` masks or reweights individual terms.
    """
    zv = _val(z)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(zv) if weight is None else np.broadcast_to(weight, zv.shape)
    out = np.sum(w * (np.logaddexp(0.0, zv) - y * zv))
    return _unary("bce", z, np.asarray(out), lambda g: g * w * (expit(zv) - y))


# -- driver ----------------------------------------------------------------

class BlockVars:
    """Name -> Var mapping over one flat parameter leaf."""

    def __init__(self, w: ParamVector, leaf: Var):
        self._w = w
        self._leaf = leaf
        self._cache: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        v = self._cache.get(name)
        if v is None:
            b = self._w.block(name)
            n, sl = len(self._w), b.slice

            def vjp(g, n=n, sl=sl):
                z = np.zeros(n)
                z[sl] = np.reshape(g, -1)
                return (z,)

            value = self._leaf.value[sl].reshape(b.shape)
            v = self._leaf.tape._push("block:" + name, (self._leaf.index,), value, vjp)
            self._cache[name] = v
        return v

    @property
    def flat(self) -> Var:
        """The whole parameter vector as one taped value."""
        return self._leaf

    def __contains__(self, name):
        return name in self._w

    def keys(self):
        return self._w.names


def forward_record(f: Callable, w: ParamVector, *inputs, **kwargs):
    """Evaluate ``f(params, *inputs)`` while recording a tape.

    ``params`` maps block names of ``w`` to taped values.  Returns the
    output value and the tape.
    """
    tape = Tape()
    leaf = tape.leaf(w.values)
    out = f(BlockVars(w, leaf), *inputs, **kwargs)
    if not isinstance(out, Var):
        # output does not depend on w
        out = tape._push("const", (), np.asarray(out, dtype=np.float64), None)
    tape.output = out.index
    return out.value, tape


def backward(tape: Tape) -> np.ndarray:
    """Gradient of the recorded scalar output with respect to the leaf."""
    if tape.output is None:
        raise ContractError("tape has no recorded output")
    out_val = tape.values[tape.output]
    if np.size(out_val) != 1:
        raise ContractError(f"backward needs a scalar output, got shape {np.shape(out_val)}")
    adj: list = [None] * len(tape.nodes)
    adj[tape.output] = np.ones_like(out_val)
    nodes = tape.nodes
    for i in range(tape.output, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            adj[p] = gp if adj[p] is None else adj[p] + gp
    tape.adjoints = adj
    g0 = adj[0]
    return np.zeros_like(tape.values[0]) if g0 is None else np.asarray(g0, dtype=np.float64)


def value_and_grad(f: Callable, w: ParamVector, *inputs, **kwargs) -> tuple[float, np.ndarray]:
    value, tape = forward_record(f, w, *inputs, **kwargs)
    return float(value), backward(tape)


def evaluate(f: Callable, w: ParamVector, *inputs, **kwargs):
    """Untaped evaluation of ``f`` on plain arrays."""
    return f(w.as_dict(), *inputs, **kwargs)
