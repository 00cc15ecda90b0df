"""Discrete subproblem: MRF over lookup-table unaries plus higher-order terms.

Backends
--------
exhaustive
    Enumerates every labeling; only for ``|L|**|V| <= 2e6``.
icm
    Single-vertex descent in seeded random order; balance cliques restrict
    moves to count-feasible ones.  Pairwise label swaps are tried whenever
    cliques are present, to leave count-locked states.
alpha_expansion
    Potts-only instances.  Each expansion move is an exact s-t min cut
    (Edmonds-Karp).  With two labels the binary problem is cut directly,
    which is globally optimal.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import (INF, CompiledEnergies, Gate, MrfSolver, check_labeling,
                   eval_total_energy)

logger = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 2_000_000
MOVE_EPS = 1e-12
ICM_RESTARTS = 250
# iterated restarts only pay off on small instances
ICM_RESTART_MAX_VERTICES = 64


class Optimality(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local_or_heuristic"


class UnsupportedTerm(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


@dataclass
class MrfInstance:
    unaries: np.ndarray
    energies: CompiledEnergies

    def __post_init__(self):
        self.unaries = np.ascontiguousarray(self.unaries, dtype=np.float64)
        n, k = self.unaries.shape
        if (n, k) != (self.energies.n_vertices, self.energies.n_labels):
            raise ValueError("unary shape does not match the energy terms")
        if not np.isfinite(self.unaries).all():
            raise ValueError("unaries must be finite")

    @property
    def n_vertices(self) -> int:
        return self.unaries.shape[0]

    @property
    def n_labels(self) -> int:
        return self.unaries.shape[1]


@dataclass
class MrfResult:
    labeling: np.ndarray
    energy: float
    optimality: Optimality


def mrf_energy(mrf: MrfInstance, y) -> float:
    higher = eval_total_energy(mrf.energies, y)
    if higher == INF:
        return INF
    y = np.asarray(y)
    return float(mrf.unaries[np.arange(len(y)), y].sum()) + higher


# -- max-flow ---------------------------------------------------------------

def _residual_graph(n_nodes, tails, heads, caps):
    """CSR residual graph with paired reverse arcs."""
    m = len(tails)
    all_tail = np.concatenate([tails, heads]).astype(np.int64)
    all_head = np.concatenate([heads, tails]).astype(np.int64)
    all_cap = np.concatenate([caps, np.zeros(m)]).astype(np.float64)
    partner = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    order = np.argsort(all_tail, kind="stable")
    position = np.empty(2 * m, dtype=np.int64)
    position[order] = np.arange(2 * m)
    head = np.ascontiguousarray(all_head[order])
    cap = np.ascontiguousarray(all_cap[order])
    rev = np.ascontiguousarray(position[partner[order]])
    ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(np.bincount(all_tail, minlength=n_nodes))
    return ptr, head, cap, rev


def maxflow_mincut(n_nodes: int, source: int, sink: int, edges):
    """Maximum s-t flow and the source side of a minimum cut.

    ``edges`` is an iterable of ``(tail, head, capacity)`` or an ``(m, 3)``
    array.  Augments along shortest paths (Edmonds-Karp), so the running
    time is ``O(V E^2)``.
    """
    edges = np.asarray(edges, dtype=np.float64).reshape(-1, 3)
    tails = edges[:, 0].astype(np.int64)
    heads = edges[:, 1].astype(np.int64)
    caps = edges[:, 2]
    if (caps < 0).any() or not np.isfinite(caps).all():
        raise ValueError("capacities must be finite and nonnegative")
    if source == sink:
        raise ValueError("source and sink must differ")
    for arr in (tails, heads):
        if arr.size and (arr.min() < 0 or arr.max() >= n_nodes):
            raise ValueError("edge endpoint out of range")
    ptr, head, cap, rev = _residual_graph(n_nodes, tails, heads, caps)
    flow = _backend.maxflow_bfs(n_nodes, source, sink, ptr, head, cap, rev)
    side = _backend.residual_reachable(n_nodes, source, ptr, head, cap).astype(bool)
    return float(flow), side


def _cut_binary(unary0, unary1, ei, ej, w00, w01, w10, w11):
    """Minimize a submodular binary energy; returns x in {0,1}^n.

    Node in the sink set means ``x = 1``.
    """
    n = len(unary0)
    s, t = n, n + 1
    coef = unary1 - unary0
    extra = w10 - w00
    np.add.at(coef, ei, extra)
    np.add.at(coef, ej, w11 - w10)
    pair = w01 + w10 - w00 - w11
    if (pair < -1e-9).any():
        raise ValueError("binary energy is not submodular")
    pos = coef > 0
    nodes = np.arange(n)
    tails = np.concatenate([np.full(pos.sum(), s), nodes[~pos], ei])
    heads = np.concatenate([nodes[pos], np.full((~pos).sum(), t), ej])
    caps = np.concatenate([coef[pos], -coef[~pos], np.maximum(pair, 0.0)])
    keep = caps > 0
    _, side = maxflow_mincut(n + 2, s, t, np.column_stack([tails[keep], heads[keep],
                                                            caps[keep]]))
    return (~side[:n]).astype(np.int64)


# -- backends ----------------------------------------------------------------

def solve_exhaustive(mrf: MrfInstance, chunk: int = 1 << 16) -> MrfResult:
    n, k = mrf.n_vertices, mrf.n_labels
    total = k ** n
    if total > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search over {k}^{n} labelings exceeds the "
                         f"limit of {EXHAUSTIVE_LIMIT}")
    comp = mrf.energies
    powers = k ** np.arange(n, dtype=np.int64)
    best_val = INF
    best_y = None
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        labels = (idx[:, None] // powers[None, :]) % k
        vals = mrf.unaries[np.arange(n)[None, :], labels].sum(axis=1)
        bad = ~comp.allowed[np.arange(n)[None, :], labels].all(axis=1)
        if comp.edge_w.size:
            cut = labels[:, comp.edge_i] != labels[:, comp.edge_j]
            vals = vals + cut.astype(np.float64) @ comp.edge_w
        for c in range(comp.n_cliques):
            members = comp.clq_idx[comp.clq_ptr[c]:comp.clq_ptr[c + 1]]
            sub = labels[:, members]
            for j in range(k):
                cnt = (sub == j).sum(axis=1)
                bad |= (cnt < comp.lower[c, j]) | (cnt > comp.upper[c, j])
        vals = np.where(bad, INF, vals)
        pos = int(np.argmin(vals))
        if vals[pos] < best_val:
            best_val = float(vals[pos])
            best_y = labels[pos].copy()
    if best_y is None:
        raise InfeasibleError("no feasible labeling exists")
    return MrfResult(best_y, mrf_energy(mrf, best_y), Optimality.GLOBAL)


def _local_descent(mrf, y, counts, order, swaps, mark, arrays):
    allowed, lower, upper = arrays
    comp = mrf.energies
    args = (mrf.unaries, allowed, y, comp.adj_ptr, comp.adj_idx, comp.adj_w,
            comp.vcl_ptr, comp.vcl_idx, counts, lower, upper)
    while True:
        _backend.icm_sweeps(*args, order, MOVE_EPS)
        if not (swaps and comp.has_cliques):
            return
        if _backend.swap_pass(*args, mark, MOVE_EPS) == 0:
            return


def _kick(mrf, y, counts, rng, strength):
    """Random count-feasible single moves and label swaps."""
    comp = mrf.energies
    n, k = mrf.n_vertices, mrf.n_labels
    for _ in range(strength):
        i, j = (int(v) for v in rng.integers(n, size=2))
        a, b = int(y[i]), int(y[j])
        if i != j and a != b and comp.allowed[i, b] and comp.allowed[j, a]:
            trial = counts.copy()
            ci = comp.vcl_idx[comp.vcl_ptr[i]:comp.vcl_ptr[i + 1]]
            cj = comp.vcl_idx[comp.vcl_ptr[j]:comp.vcl_ptr[j + 1]]
            np.subtract.at(trial, (ci, a), 1)
            np.add.at(trial, (ci, b), 1)
            np.subtract.at(trial, (cj, b), 1)
            np.add.at(trial, (cj, a), 1)
            if not ((trial < comp.lower).any() or (trial > comp.upper).any()):
                counts[:] = trial
                y[i], y[j] = b, a
                continue
        b = int(rng.integers(k))
        if b == a or not comp.allowed[i, b]:
            continue
        ci = comp.vcl_idx[comp.vcl_ptr[i]:comp.vcl_ptr[i + 1]]
        if (counts[ci, a] - 1 >= comp.lower[ci, a]).all() and \
                (counts[ci, b] + 1 <= comp.upper[ci, b]).all():
            counts[ci, a] -= 1
            counts[ci, b] += 1
            y[i] = b


def solve_icm(mrf: MrfInstance, warm_start, seed=0, swaps: bool = True,
              restarts: int = 0) -> MrfResult:
    """ICM with swap repair, optionally iterated from random kicks.

    With ``restarts > 0`` the best local minimum is perturbed by a few
    random count-feasible moves and descended again, ``restarts`` times;
    the best labeling found is returned.
    """
    comp = mrf.energies
    y = np.array(warm_start, dtype=np.int64)
    if eval_total_energy(comp, y) == INF:
        raise InfeasibleError("ICM needs a feasible warm start")
    rng = np.random.default_rng(seed)
    order = rng.permutation(mrf.n_vertices).astype(np.int64)
    arrays = (np.ascontiguousarray(comp.allowed, dtype=np.uint8),
              np.ascontiguousarray(comp.lower.reshape(-1, mrf.n_labels)),
              np.ascontiguousarray(comp.upper.reshape(-1, mrf.n_labels)))
    counts = np.ascontiguousarray(comp.clique_counts(y).reshape(-1, mrf.n_labels))
    mark = np.zeros(max(comp.n_cliques, 1), dtype=np.int64)
    _local_descent(mrf, y, counts, order, swaps, mark, arrays)
    best_y, best_e = y.copy(), mrf_energy(mrf, y)
    strength = max(2, mrf.n_vertices // 10)
    for r in range(restarts):
        y = best_y.copy()
        if comp.has_cliques and r % 3:
            # scramble a few labels and walk back to feasibility; reaches
            # regions that swaps alone cannot when bounds are tight
            size = int(rng.integers(strength, mrf.n_vertices + 1))
            idx = rng.choice(mrf.n_vertices, size=size, replace=False)
            y[idx] = rng.integers(mrf.n_labels, size=idx.size)
            try:
                y = repair_feasibility(mrf, y, seed=int(rng.integers(2**31)))
            except InfeasibleError:
                continue
            counts = np.ascontiguousarray(comp.clique_counts(y).reshape(-1, mrf.n_labels))
        else:
            counts = np.ascontiguousarray(comp.clique_counts(y).reshape(-1, mrf.n_labels))
            _kick(mrf, y, counts, rng, strength)
        _local_descent(mrf, y, counts, order, swaps, mark, arrays)
        e = mrf_energy(mrf, y)
        if e < best_e:
            best_y, best_e = y.copy(), e
    return MrfResult(best_y, best_e, Optimality.LOCAL)


def _check_potts_only(comp: CompiledEnergies):
    if comp.has_cliques:
        raise UnsupportedTerm("unsupported term for this backend: BalanceClique "
                              "(alpha expansion handles Potts and clamp terms only)")


def _clamp_penalty(mrf: MrfInstance) -> np.ndarray:
    comp = mrf.energies
    big = 1.0 + np.abs(mrf.unaries).sum() + comp.edge_w.sum()
    return np.where(comp.allowed, mrf.unaries, mrf.unaries + big)


def solve_alpha_expansion(mrf: MrfInstance, warm_start, max_cycles: int = 100) -> MrfResult:
    comp = mrf.energies
    _check_potts_only(comp)
    unary = _clamp_penalty(mrf)
    ei, ej, w = comp.edge_i, comp.edge_j, comp.edge_w
    y = np.array(warm_start, dtype=np.int64)
    zeros = np.zeros_like(w)
    if mrf.n_labels == 2:
        x = _cut_binary(unary[:, 0], unary[:, 1], ei, ej, zeros, w, w, zeros)
        cand = x
        if mrf_energy(mrf, cand) <= mrf_energy(mrf, y):
            y = cand
        if mrf_energy(mrf, y) == INF:
            raise InfeasibleError("clamps could not be satisfied")
        return MrfResult(y, mrf_energy(mrf, y), Optimality.GLOBAL)

    def penalized(lab):
        return float(unary[np.arange(len(lab)), lab].sum()
                     + (w * (lab[ei] != lab[ej])).sum())

    current = penalized(y)
    rows = np.arange(mrf.n_vertices)
    for _ in range(max_cycles):
        improved = False
        for alpha in range(mrf.n_labels):
            keep = y
            d0 = unary[rows, keep]
            d1 = unary[:, alpha]
            a = w * (keep[ei] != keep[ej])
            b = w * (keep[ei] != alpha)
            c = w * (alpha != keep[ej])
            x = _cut_binary(d0, d1, ei, ej, a, b, c, zeros)
            cand = np.where(x == 1, alpha, keep)
            value = penalized(cand)
            if value < current - MOVE_EPS * (1.0 + abs(current)):
                y, current, improved = cand, value, True
        if not improved:
            break
    energy = mrf_energy(mrf, y)
    if energy == INF:
        raise InfeasibleError("alpha expansion ended on a clamp-violating labeling")
    return MrfResult(y, energy, Optimality.LOCAL)


# -- feasibility repair -------------------------------------------------------

def _violation(counts, lower, upper):
    return int(np.maximum(lower - counts, 0).sum() + np.maximum(counts - upper, 0).sum())


def repair_feasibility(mrf: MrfInstance, y, seed=0, max_steps=None,
                       noise: float = 0.2) -> np.ndarray:
    """Local search for a labeling satisfying clamps and balance cliques.

    Clamped vertices are set first.  Then the single-vertex move that most
    reduces the total count violation is applied, cheapest unary increase
    first.  When no move reduces the violation, a min-conflicts step is
    taken inside a randomly chosen violated clique (random move with
    probability ``noise``).  Raises
    :class:`InfeasibleError` when the step budget runs out.
    """
    comp = mrf.energies
    n, k = mrf.n_vertices, mrf.n_labels
    y = np.array(y, dtype=np.int64)
    clamped = comp.allowed.sum(axis=1) == 1
    y[clamped] = comp.allowed[clamped].argmax(axis=1)
    bad = ~comp.allowed[np.arange(n), y]
    y[bad] = comp.allowed[bad].argmax(axis=1)
    if not comp.has_cliques:
        return y
    rng = np.random.default_rng(seed)
    counts = comp.clique_counts(y)
    lower, upper = comp.lower, comp.upper
    total = _violation(counts, lower, upper)
    cliques_of = [comp.vcl_idx[comp.vcl_ptr[i]:comp.vcl_ptr[i + 1]] for i in range(n)]
    movable = np.array([i for i in range(n) if not clamped[i] and len(cliques_of[i])],
                       dtype=np.int64)
    if max_steps is None:
        max_steps = 200 * n + 1000

    def excess(cl, lab, cnt):
        return np.maximum(lower[cl, lab] - cnt, 0) + np.maximum(cnt - upper[cl, lab], 0)

    def move_delta(i, a, b):
        cl = cliques_of[i]
        ca, cb = counts[cl, a], counts[cl, b]
        before = excess(cl, a, ca) + excess(cl, b, cb)
        after = excess(cl, a, ca - 1) + excess(cl, b, cb + 1)
        return int(after.sum() - before.sum())

    def apply(i, b):
        cl = cliques_of[i]
        counts[cl, y[i]] -= 1
        counts[cl, b] += 1
        y[i] = b

    stalled = False
    last = -1
    for _ in range(max_steps):
        if total == 0:
            return y
        best = None
        for i in movable if not stalled else ():
            a = y[i]
            for b in range(k):
                if b == a or not comp.allowed[i, b]:
                    continue
                d = move_delta(i, a, b)
                if d < 0:
                    key = (d, mrf.unaries[i, b] - mrf.unaries[i, a], i, b)
                    if best is None or key < best:
                        best = key
        if best is not None:
            apply(best[2], best[3])
            total += best[0]
            continue
        # min-conflicts step inside a random violated clique; from here on
        # the greedy scan would only undo these moves
        stalled = True
        violated = np.flatnonzero(((counts < lower) | (counts > upper)).any(axis=1))
        c = int(rng.choice(violated))
        members = comp.clq_idx[comp.clq_ptr[c]:comp.clq_ptr[c + 1]]
        members = members[~clamped[members]]
        moves = [(move_delta(i, y[i], b), int(i), b) for i in members if i != last
                 for b in range(k) if b != y[i] and comp.allowed[i, b]]
        if not moves:
            break
        if rng.random() < noise:
            d, i, b = moves[int(rng.integers(len(moves)))]
        else:
            low = min(m[0] for m in moves)
            ties = [m for m in moves if m[0] == low]
            d, i, b = ties[int(rng.integers(len(ties)))]
        apply(i, b)
        total += d
        last = i
    if total == 0:
        return y
    raise InfeasibleError(f"feasibility repair failed with total count violation {total}")


# -- dispatch and descent gate ---------------------------------------------

def solve_mrf(mrf: MrfInstance, warm_start, solver=MrfSolver.ICM, seed=0,
              restarts=None) -> MrfResult:
    """Minimize unaries plus energy terms, never worse than a feasible warm start.

    An infeasible warm start is first passed through
    :func:`repair_feasibility`.  ``restarts`` is the number of ICM kicks;
    by default ``ICM_RESTARTS`` on instances of at most
    ``ICM_RESTART_MAX_VERTICES`` vertices and none above.
    """
    solver = MrfSolver.parse(solver)
    comp = mrf.energies
    warm = check_labeling(warm_start, mrf.n_vertices, mrf.n_labels)
    if solver is MrfSolver.ALPHA_EXPANSION:
        _check_potts_only(comp)
    if restarts is None:
        restarts = ICM_RESTARTS if mrf.n_vertices <= ICM_RESTART_MAX_VERTICES else 0
    if eval_total_energy(comp, warm) == INF:
        warm = repair_feasibility(mrf, warm, seed=seed)
    if solver is MrfSolver.EXHAUSTIVE:
        result = solve_exhaustive(mrf)
    elif solver is MrfSolver.ALPHA_EXPANSION:
        result = solve_alpha_expansion(mrf, warm)
    else:
        result = solve_icm(mrf, warm, seed=seed, restarts=restarts)
    warm_energy = mrf_energy(mrf, warm)
    if result.energy > warm_energy:
        # only reachable through floating-point ties in the cut backends
        return MrfResult(warm, warm_energy, Optimality.LOCAL)
    return result


def gate_difference(table, energies, y_prev, y_prop) -> float:
    """Change of the augmented Lagrangian when moving from ``y_prev`` to ``y_prop``.

    At fixed ``(alpha, lam)`` with both ``beta`` rows read from the same
    lookup table, the difference reduces to unary and energy-term
    differences.
    """
    e_prev = eval_total_energy(energies, y_prev)
    if e_prev == INF:
        raise ValueError("previous labeling has infinite energy: invalid prior state")
    e_prop = eval_total_energy(energies, y_prop)
    if e_prop == INF:
        return INF
    rows = np.arange(len(y_prev))
    du = table.u[rows, y_prop] - table.u[rows, y_prev]
    return float(du.sum() + (e_prop - e_prev))


def descent_gate(table, energies, y_prev, y_prop, delta: float) -> Gate:
    diff = gate_difference(table, energies, y_prev, y_prop)
    return Gate.ACCEPTED if diff <= -delta else Gate.REJECTED
