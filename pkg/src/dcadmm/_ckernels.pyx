# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: ICM sweeps, swap repair, Edmonds-Karp max-flow.

Mirrors ``_pykernels`` operation for operation so both backends produce
bit-identical results.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.math cimport INFINITY

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline bint _admissible_move(Py_ssize_t i, i64 a, i64 b, const i64[::1] vcl_ptr,
                                  const i64[::1] vcl_idx, i64[:, ::1] counts,
                                  const i64[:, ::1] lower, const i64[:, ::1] upper) nogil:
    cdef Py_ssize_t p
    cdef i64 c
    for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
        c = vcl_idx[p]
        if counts[c, a] - 1 < lower[c, a] or counts[c, b] + 1 > upper[c, b]:
            return False
    return True


def icm_sweeps(const double[:, ::1] unary, const cnp.uint8_t[:, ::1] allowed, i64[::1] y,
               const i64[::1] adj_ptr, const i64[::1] adj_idx, const double[::1] adj_w,
               const i64[::1] vcl_ptr, const i64[::1] vcl_idx, i64[:, ::1] counts,
               const i64[:, ::1] lower, const i64[:, ::1] upper, const i64[::1] order,
               double eps):
    cdef Py_ssize_t n = unary.shape[0], k = unary.shape[1]
    cdef Py_ssize_t t, p, i
    cdef i64 a, b, best_b, c
    cdef double gain, best_gain
    cdef long moves = 0, moved
    cdef double *same = <double *> malloc(k * sizeof(double))
    if same == NULL:
        raise MemoryError()
    try:
        with nogil:
            while True:
                moved = 0
                for t in range(order.shape[0]):
                    i = order[t]
                    a = y[i]
                    for b in range(k):
                        same[b] = 0.0
                    for p in range(adj_ptr[i], adj_ptr[i + 1]):
                        same[y[adj_idx[p]]] += adj_w[p]
                    best_gain = -eps
                    best_b = -1
                    for b in range(k):
                        if b == a or not allowed[i, b]:
                            continue
                        gain = (unary[i, b] - unary[i, a]) + (same[a] - same[b])
                        if gain < best_gain and _admissible_move(i, a, b, vcl_ptr, vcl_idx,
                                                                 counts, lower, upper):
                            best_gain = gain
                            best_b = b
                    if best_b >= 0:
                        for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
                            c = vcl_idx[p]
                            counts[c, a] -= 1
                            counts[c, best_b] += 1
                        y[i] = best_b
                        moved += 1
                moves += moved
                if moved == 0:
                    break
    finally:
        free(same)
    return moves


cdef inline double _same_label_weight(Py_ssize_t i, i64 label, i64[::1] y,
                                      const i64[::1] adj_ptr, const i64[::1] adj_idx,
                                      const double[::1] adj_w) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t p
    for p in range(adj_ptr[i], adj_ptr[i + 1]):
        if y[adj_idx[p]] == label:
            s += adj_w[p]
    return s


cdef inline double _edge_weight(Py_ssize_t i, Py_ssize_t j, const i64[::1] adj_ptr,
                                const i64[::1] adj_idx, const double[::1] adj_w) nogil:
    cdef double w = 0.0
    cdef Py_ssize_t p
    for p in range(adj_ptr[i], adj_ptr[i + 1]):
        if adj_idx[p] == j:
            w += adj_w[p]
    return w


def swap_pass(const double[:, ::1] unary, const cnp.uint8_t[:, ::1] allowed, i64[::1] y,
              const i64[::1] adj_ptr, const i64[::1] adj_idx, const double[::1] adj_w,
              const i64[::1] vcl_ptr, const i64[::1] vcl_idx, i64[:, ::1] counts,
              const i64[:, ::1] lower, const i64[:, ::1] upper, i64[::1] mark,
              double eps):
    cdef Py_ssize_t n = unary.shape[0]
    cdef Py_ssize_t i, j, p
    cdef i64 a, b, c
    cdef double gain
    cdef bint ok
    cdef long swaps = 0
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                a = y[i]
                b = y[j]
                if a == b or not allowed[i, b] or not allowed[j, a]:
                    continue
                gain = (unary[i, b] - unary[i, a]) + (unary[j, a] - unary[j, b])
                if adj_ptr[i + 1] > adj_ptr[i] or adj_ptr[j + 1] > adj_ptr[j]:
                    gain += (_same_label_weight(i, a, y, adj_ptr, adj_idx, adj_w)
                             - _same_label_weight(i, b, y, adj_ptr, adj_idx, adj_w))
                    gain += (_same_label_weight(j, b, y, adj_ptr, adj_idx, adj_w)
                             - _same_label_weight(j, a, y, adj_ptr, adj_idx, adj_w))
                    gain += 2.0 * _edge_weight(i, j, adj_ptr, adj_idx, adj_w)
                if not gain < -eps:
                    continue
                for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
                    mark[vcl_idx[p]] += 1
                for p in range(vcl_ptr[j], vcl_ptr[j + 1]):
                    mark[vcl_idx[p]] += 2
                ok = True
                for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
                    c = vcl_idx[p]
                    if mark[c] == 1 and (counts[c, a] - 1 < lower[c, a]
                                         or counts[c, b] + 1 > upper[c, b]):
                        ok = False
                        break
                if ok:
                    for p in range(vcl_ptr[j], vcl_ptr[j + 1]):
                        c = vcl_idx[p]
                        if mark[c] == 2 and (counts[c, b] - 1 < lower[c, b]
                                             or counts[c, a] + 1 > upper[c, a]):
                            ok = False
                            break
                if ok:
                    for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
                        c = vcl_idx[p]
                        if mark[c] == 1:
                            counts[c, a] -= 1
                            counts[c, b] += 1
                    for p in range(vcl_ptr[j], vcl_ptr[j + 1]):
                        c = vcl_idx[p]
                        if mark[c] == 2:
                            counts[c, b] -= 1
                            counts[c, a] += 1
                    y[i] = b
                    y[j] = a
                    swaps += 1
                for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
                    mark[vcl_idx[p]] = 0
                for p in range(vcl_ptr[j], vcl_ptr[j + 1]):
                    mark[vcl_idx[p]] = 0
    return swaps


def maxflow_bfs(Py_ssize_t n, Py_ssize_t source, Py_ssize_t sink, const i64[::1] ptr,
                const i64[::1] head, double[::1] cap, const i64[::1] rev):
    cdef double flow = 0.0, bottleneck
    cdef i64[::1] parent_arc = np.empty(n, dtype=np.int64)
    cdef i64[::1] queue = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t qh, qt, u, v, a
    with nogil:
        while True:
            parent_arc[:] = -1
            parent_arc[source] = -2
            queue[0] = source
            qh = 0
            qt = 1
            while qh < qt and parent_arc[sink] == -1:
                u = queue[qh]
                qh += 1
                for a in range(ptr[u], ptr[u + 1]):
                    v = head[a]
                    if cap[a] > 0.0 and parent_arc[v] == -1:
                        parent_arc[v] = a
                        queue[qt] = v
                        qt += 1
            if parent_arc[sink] == -1:
                break
            bottleneck = INFINITY
            v = sink
            while v != source:
                a = parent_arc[v]
                if cap[a] < bottleneck:
                    bottleneck = cap[a]
                v = head[rev[a]]
            v = sink
            while v != source:
                a = parent_arc[v]
                cap[a] -= bottleneck
                cap[rev[a]] += bottleneck
                v = head[rev[a]]
            flow += bottleneck
    return flow


def residual_reachable(Py_ssize_t n, Py_ssize_t source, const i64[::1] ptr,
                       const i64[::1] head, const double[::1] cap):
    seen_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] seen = seen_arr
    cdef i64[::1] stack = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t top = 1, u, v, a
    stack[0] = source
    seen[source] = 1
    with nogil:
        while top > 0:
            top -= 1
            u = stack[top]
            for a in range(ptr[u], ptr[u + 1]):
                v = head[a]
                if cap[a] > 0.0 and not seen[v]:
                    seen[v] = 1
                    stack[top] = v
                    top += 1
    return seen_arr
