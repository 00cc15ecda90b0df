"""Pure-Python implementations of the hot loops.

Same signatures and floating-point operation order as ``_ckernels.pyx``;
used when the compiled extension is unavailable or ``DCADMM_PURE=1``.
"""

from collections import deque

import numpy as np


def _admissible_move(i, a, b, vcl_ptr, vcl_idx, counts, lower, upper):
    for p in range(vcl_ptr[i], vcl_ptr[i + 1]):
        c = vcl_idx[p]
        if counts[c, a] - 1 < lower[c, a] or counts[c, b] + 1 > upper[c, b]:
            return False
    return True


def icm_sweeps(unary, allowed, y, adj_ptr, adj_idx, adj_w, vcl_ptr, vcl_idx,
               counts, lower, upper, order, eps):
    """Single-vertex descent until no admissible move improves.

    Modifies ``y`` and ``counts`` in place and returns the number of moves.
    """
    n, k = unary.shape
    same = [0.0] * k
    moves = 0
    while True:
        moved = 0
        for i in order:
            a = int(y[i])
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
            return moves


def _same_label_weight(i, label, y, adj_ptr, adj_idx, adj_w):
    s = 0.0
    for p in range(adj_ptr[i], adj_ptr[i + 1]):
        if y[adj_idx[p]] == label:
            s += adj_w[p]
    return s


def _edge_weight(i, j, adj_ptr, adj_idx, adj_w):
    w = 0.0
    for p in range(adj_ptr[i], adj_ptr[i + 1]):
        if adj_idx[p] == j:
            w += adj_w[p]
    return w


def swap_pass(unary, allowed, y, adj_ptr, adj_idx, adj_w, vcl_ptr, vcl_idx,
              counts, lower, upper, mark, eps):
    """One pass over vertex pairs exchanging labels when that improves.

    ``mark`` is a zeroed scratch array with one entry per clique.
    Returns the number of swaps applied.
    """
    n, k = unary.shape
    swaps = 0
    for i in range(n):
        for j in range(i + 1, n):
            a = int(y[i])
            b = int(y[j])
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


def maxflow_bfs(n, source, sink, ptr, head, cap, rev):
    """Edmonds-Karp on a residual graph in CSR form; ``cap`` is updated in place."""
    flow = 0.0
    parent_arc = np.empty(n, dtype=np.int64)
    while True:
        parent_arc.fill(-1)
        parent_arc[source] = -2
        queue = deque([source])
        while queue and parent_arc[sink] == -1:
            u = queue.popleft()
            for a in range(ptr[u], ptr[u + 1]):
                v = head[a]
                if cap[a] > 0.0 and parent_arc[v] == -1:
                    parent_arc[v] = a
                    queue.append(v)
        if parent_arc[sink] == -1:
            return flow
        bottleneck = np.inf
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


def residual_reachable(n, source, ptr, head, cap):
    seen = np.zeros(n, dtype=np.uint8)
    seen[source] = 1
    stack = [source]
    while stack:
        u = stack.pop()
        for a in range(ptr[u], ptr[u + 1]):
            v = head[a]
            if cap[a] > 0.0 and not seen[v]:
                seen[v] = 1
                stack.append(v)
    return seen
