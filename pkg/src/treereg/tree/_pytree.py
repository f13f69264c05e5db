"""Pure-numpy CART kernels; the fallback when the extension is not built.

Node numbering, thresholds and tie-breaking match ``_ctree.pyx`` exactly.
"""

import numpy as np

GAIN_TOL = 1e-12


def _best_split(Xn, yn, pos, min_leaf):
    m, F = Xn.shape
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    cpos = np.cumsum(yn[order].astype(np.intp), axis=0)[:-1]  # positives left of a cut after row i
    nl = np.arange(1, m, dtype=np.intp)[:, None]
    nr = m - nl
    ok = (nl >= min_leaf) & (nr >= min_leaf) & (xs[:-1] < xs[1:])
    pl = cpos
    pr = pos - pl
    parent = 2.0 * pos * (m - pos) / m
    with np.errstate(invalid="ignore", divide="ignore"):
        gain = (parent - (2.0 * pl * (nl - pl) / nl + 2.0 * pr * (nr - pr) / nr)) / m
    gain = np.where(ok, gain, -np.inf)

    best_gain, best = -np.inf, None
    for f in range(F):
        i = int(np.argmax(gain[:, f]))
        g = gain[i, f]
        # zero-gain splits are allowed on impure nodes (balanced XOR)
        if np.isfinite(g) and (best is None or g > best_gain + GAIN_TOL):
            lo, hi = xs[i, f], xs[i + 1, f]
            thr = (lo + hi) / 2.0
            if thr >= hi:
                thr = lo
            best_gain, best = g, (f, thr)
    return best


def build_tree(X, y, min_leaf):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.uint8)
    n = X.shape[0]
    feature, threshold, left, right, count, npos = [-1], [0.0], [-1], [-1], [0], [0]
    stack = [(0, np.arange(n))]
    while stack:
        node, idx = stack.pop()
        m = idx.size
        yn = y[idx]
        pos = int(yn.sum())
        count[node], npos[node] = m, pos
        if pos == 0 or pos == m or m < 2 * min_leaf:
            continue
        best = _best_split(X[idx], yn, pos, min_leaf)
        if best is None:
            continue
        f, thr = best
        go_left = X[idx, f] <= thr
        lid = len(feature)
        for _ in range(2):
            feature.append(-1); threshold.append(0.0); left.append(-1)
            right.append(-1); count.append(0); npos.append(0)
        feature[node], threshold[node], left[node], right[node] = f, thr, lid, lid + 1
        stack.append((lid + 1, idx[~go_left]))
        stack.append((lid, idx[go_left]))
    return (np.array(feature, dtype=np.intp), np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
            np.array(count, dtype=np.intp), np.array(npos, dtype=np.intp))


def apply_tree(X, feature, threshold, left, right):
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    node = np.zeros(n, dtype=np.intp)
    depth = np.zeros(n, dtype=np.intp)
    rows = np.arange(n)
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        go = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go, left[nd], right[nd])
        depth[r] += 1
        active[r] = feature[node[r]] >= 0
    return node, depth
