import numpy as np
import pytest

from treereg import autodiff as ad

# PASS/FAIL lines from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def fd_grad(f, w, h=1e-5):
    """Central finite differences of ``f(params)`` with respect to ``w.values``."""
    g = np.zeros(len(w))
    base = w.values
    for i in range(len(w)):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        g[i] = (float(ad.evaluate(f, w.with_values(plus))) - float(ad.evaluate(f, w.with_values(minus)))) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gini_root_oracle(X, y, min_leaf):
    """Exhaustive search: best (gain, feature, threshold) over midpoints, ties to lowest feature/threshold."""
    n = len(y)
    parent = 1 - (y.mean() ** 2 + (1 - y.mean()) ** 2)
    best = (-np.inf, None, None)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = (lo + hi) / 2
            left = X[:, f] <= thr
            nl = left.sum()
            if nl < min_leaf or n - nl < min_leaf:
                continue
            child = 0.0
            for part in (y[left], y[~left]):
                p = part.mean()
                child += len(part) / n * (1 - p * p - (1 - p) ** 2)
            gain = parent - child
            if gain > best[0] + 1e-12:
                best = (gain, f, thr)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
