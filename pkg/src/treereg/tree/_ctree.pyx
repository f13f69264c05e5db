# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled CART kernels. Must stay numerically identical to _pytree.py."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double GAIN_TOL = 1e-12


def build_tree(const double[:, ::1] X, const unsigned char[::1] y, int min_leaf):
    """Greedy Gini CART. Returns (feature, threshold, left, right, count, npos).

    Every feature is sorted once; a node owns the same slice of each
    feature's sorted row list, and splitting stable-partitions those slices.
    """
    cdef Py_ssize_t n = X.shape[0], F = X.shape[1]
    cdef Py_ssize_t cap = 2 * n + 1
    feature_a = np.full(cap, -1, dtype=np.intp)
    threshold_a = np.zeros(cap, dtype=np.float64)
    left_a = np.full(cap, -1, dtype=np.intp)
    right_a = np.full(cap, -1, dtype=np.intp)
    count_a = np.zeros(cap, dtype=np.intp)
    npos_a = np.zeros(cap, dtype=np.intp)
    cdef Py_ssize_t[::1] feature = feature_a, left = left_a, right = right_a
    cdef Py_ssize_t[::1] count = count_a, npos = npos_a
    cdef double[::1] threshold = threshold_a
    order_a = np.ascontiguousarray(np.argsort(np.asarray(X), axis=0, kind="stable").T, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] order = order_a

    cdef Py_ssize_t* tmp = <Py_ssize_t*>malloc(n * sizeof(Py_ssize_t))
    cdef unsigned char* goleft = <unsigned char*>malloc(n * sizeof(unsigned char))
    cdef Py_ssize_t* st_node = <Py_ssize_t*>malloc(cap * sizeof(Py_ssize_t))
    cdef Py_ssize_t* st_start = <Py_ssize_t*>malloc(cap * sizeof(Py_ssize_t))
    cdef Py_ssize_t* st_end = <Py_ssize_t*>malloc(cap * sizeof(Py_ssize_t))
    if not tmp or not goleft or not st_node or not st_start or not st_end:
        free(tmp); free(goleft); free(st_node); free(st_start); free(st_end)
        raise MemoryError()

    cdef Py_ssize_t i, k, f, r, sp, node, start, end, m, pos, nl, nr, pl, pr
    cdef Py_ssize_t best_f, fi, n_nodes, nleft, a, b
    cdef double parent, g, fbest, flo, fhi, best_gain, best_thr, thr, v, vnext
    try:
        with nogil:
            n_nodes = 1
            sp = 1
            st_node[0] = 0
            st_start[0] = 0
            st_end[0] = n
            while sp > 0:
                sp -= 1
                node = st_node[sp]
                start = st_start[sp]
                end = st_end[sp]
                m = end - start
                pos = 0
                for k in range(start, end):
                    pos += y[order[0, k]]
                count[node] = m
                npos[node] = pos
                if pos == 0 or pos == m or m < 2 * min_leaf:
                    continue
                parent = 2.0 * pos * (m - pos) / m
                best_gain = 0.0
                best_f = -1
                best_thr = 0.0
                for f in range(F):
                    fbest = -1.0
                    fi = -1
                    flo = 0.0
                    fhi = 0.0
                    pl = 0
                    for i in range(m - 1):
                        r = order[f, start + i]
                        pl += y[r]
                        nl = i + 1
                        if nl < min_leaf:
                            continue
                        nr = m - nl
                        if nr < min_leaf:
                            break
                        v = X[r, f]
                        vnext = X[order[f, start + i + 1], f]
                        if not (v < vnext):
                            continue
                        pr = pos - pl
                        g = (parent - (2.0 * pl * (nl - pl) / nl + 2.0 * pr * (nr - pr) / nr)) / m
                        if fi < 0 or g > fbest:
                            fbest = g
                            fi = i
                            flo = v
                            fhi = vnext
                    # zero-gain splits are allowed on impure nodes (balanced XOR)
                    if fi >= 0 and (best_f < 0 or fbest > best_gain + GAIN_TOL):
                        best_gain = fbest
                        best_f = f
                        thr = (flo + fhi) / 2.0
                        if thr >= fhi:
                            thr = flo
                        best_thr = thr
                if best_f < 0:
                    continue
                nleft = 0
                for k in range(start, end):
                    r = order[0, k]
                    goleft[r] = X[r, best_f] <= best_thr
                    nleft += goleft[r]
                for f in range(F):
                    a = 0
                    b = 0
                    for k in range(start, end):
                        r = order[f, k]
                        if goleft[r]:
                            order[f, start + a] = r
                            a += 1
                        else:
                            tmp[b] = r
                            b += 1
                    for k in range(b):
                        order[f, start + a + k] = tmp[k]
                feature[node] = best_f
                threshold[node] = best_thr
                left[node] = n_nodes
                right[node] = n_nodes + 1
                st_node[sp] = n_nodes + 1
                st_start[sp] = start + nleft
                st_end[sp] = end
                sp += 1
                st_node[sp] = n_nodes
                st_start[sp] = start
                st_end[sp] = start + nleft
                sp += 1
                n_nodes += 2
    finally:
        free(tmp); free(goleft); free(st_node); free(st_start); free(st_end)
    return (feature_a[:n_nodes].copy(), threshold_a[:n_nodes].copy(), left_a[:n_nodes].copy(),
            right_a[:n_nodes].copy(), count_a[:n_nodes].copy(), npos_a[:n_nodes].copy())


def apply_tree(const double[:, ::1] X, const Py_ssize_t[::1] feature, const double[::1] threshold,
               const Py_ssize_t[::1] left, const Py_ssize_t[::1] right):
    """Leaf index and number of decisions taken for every row of X."""
    cdef Py_ssize_t n = X.shape[0], r, node, d
    leaf_a = np.empty(n, dtype=np.intp)
    depth_a = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] leaf = leaf_a, depth = depth_a
    with nogil:
        for r in range(n):
            node = 0
            d = 0
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
                d += 1
            leaf[r] = node
            depth[r] = d
    return leaf_a, depth_a
