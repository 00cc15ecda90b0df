"""Comparison methods: constrained kernel k-means and discrete-continuous
coordinate descent on the mixed-integer objective."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .admm import RunReport, block_cg, fill_supervised_gap, initial_labeling
from .core import (INF, Gate, IterationTrace, MrfSolver, SolverConfig, SolverState,
                   Termination, check_labeling, eval_total_energy, loss_rows)
from .mrf import MrfInstance, repair_feasibility, solve_mrf
from .prox import build_lookup_table, prox_batch
from .supervised import primal_objective, solve_supervised

logger = logging.getLogger(__name__)

KKMEANS_MAX_ROUNDS = 200


# -- constrained kernel k-means ---------------------------------------------

def kernel_distances(kernel, assignment, n_labels: int):
    """Squared feature-space distance of every point to every implicit centroid.

    Empty clusters get ``K_ii`` (a centroid at the origin).
    """
    n = kernel.n
    z = np.zeros((n, n_labels))
    z[np.arange(n), assignment] = 1.0
    counts = z.sum(axis=0)
    kz = kernel.matvec(z)
    safe = np.where(counts > 0, counts, 1.0)
    within = np.einsum("ic,ic->c", z, kz) / safe ** 2
    d = kernel.diagonal()[:, None] - 2.0 * kz / safe + within[None, :]
    d[:, counts == 0] = kernel.diagonal()[:, None]
    return d, counts.astype(np.int64)


@dataclass
class KKMeansState:
    assignment: np.ndarray
    cluster_counts: np.ndarray
    distances: np.ndarray

    @classmethod
    def from_assignment(cls, kernel, assignment, n_labels):
        a = np.asarray(assignment, dtype=np.int64)
        d, counts = kernel_distances(kernel, a, n_labels)
        return cls(a, counts, d)

    def objective(self) -> float:
        return float(self.distances[np.arange(len(self.assignment)), self.assignment].sum())


def kkmeans_step(kernel, state: KKMeansState, energies, solver=MrfSolver.ICM,
                 seed=0) -> KKMeansState:
    """E-step as an MRF over kernel distances; the M-step is implicit.

    A cluster left empty is re-seeded with the point farthest from its
    current centroid (lowest index on ties) when that keeps the hard terms
    satisfied.
    """
    k = state.distances.shape[1]
    mrf = MrfInstance(state.distances, energies)
    y = solve_mrf(mrf, state.assignment, solver=solver, seed=seed).labeling.copy()
    counts = np.bincount(y, minlength=k)
    for c in np.flatnonzero(counts == 0):
        own = state.distances[np.arange(len(y)), y]
        for i in np.argsort(-own, kind="stable"):
            if counts[y[i]] <= 1:
                continue
            trial = y.copy()
            trial[i] = c
            if eval_total_energy(energies, trial) != INF:
                counts[y[i]] -= 1
                counts[c] += 1
                y = trial
                break
    return KKMeansState.from_assignment(kernel, y, k)


@dataclass
class KKMeansResult:
    labels: np.ndarray
    objective_trace: List[float]
    rounds: int
    converged: bool
    wall_time: float


def constrained_kernel_kmeans(kernel, energies, n_labels: int, y0,
                              max_rounds: int = KKMEANS_MAX_ROUNDS,
                              solver=MrfSolver.ICM, seed=0,
                              trace_sink: Optional[Callable[[IterationTrace], None]] = None
                              ) -> KKMeansResult:
    """Alternate constrained E-steps until the assignment stops changing.

    ``trace_sink`` receives one :class:`IterationTrace` per round with the
    clustering objective in the Lagrangian slot.
    """
    start = time.perf_counter()
    y = check_labeling(y0, kernel.n, n_labels)
    if eval_total_energy(energies, y) == INF:
        y = repair_feasibility(MrfInstance(np.zeros((kernel.n, n_labels)), energies), y,
                               seed=seed)
    state = KKMeansState.from_assignment(kernel, y, n_labels)
    trace = [state.objective()]
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        tick = time.perf_counter()
        new = kkmeans_step(kernel, state, energies, solver=solver, seed=seed + rounds)
        trace.append(new.objective())
        done = np.array_equal(new.assignment, state.assignment)
        if trace_sink is not None:
            trace_sink(IterationTrace(
                iteration=rounds, rho=0.0, lagrangian_value=trace[-1], primal_residual=0.0,
                alpha_step=0.0,
                labels_changed=int(np.count_nonzero(new.assignment != state.assignment)),
                descent_gate=Gate.ACCEPTED, mrf_energy=trace[-1],
                wall_time=time.perf_counter() - tick))
        state = new
        if done:
            converged = True
            break
    return KKMeansResult(state.assignment, trace, rounds, converged,
                         time.perf_counter() - start)


# -- coordinate descent --------------------------------------------------------

def label_unaries(loss, scores) -> np.ndarray:
    """``u[i, c] = l(c; scores_i)`` for every candidate label."""
    n, k = scores.shape
    reps = np.repeat(scores, k, axis=0)
    labels = np.tile(np.arange(k), n)
    return loss_rows(loss, labels, reps).reshape(n, k)


def mixed_objective(instance, y, alpha) -> float:
    """Loss plus regularizer plus energy terms at ``(alpha, y)``."""
    energy = eval_total_energy(instance.compiled, y)
    if energy == INF:
        return INF
    return primal_objective(instance, y, alpha) + energy


def fit_alpha(instance, y, lam=None, tol: float = 1e-10, eig_max=None):
    """Exact supervised fit; returns ``(alpha, lam)``.

    Without regularization the fit is done in score space: every vertex
    gets the smallest-norm minimizer of its loss, and ``alpha`` solves
    ``K alpha = scores``.  Losses without a minimizer raise ``ValueError``.
    """
    if instance.nu > 0:
        alpha, lam, _, _ = solve_supervised(instance, y, lam0=lam, tol=tol, eig_max=eig_max)
        return alpha, lam
    n, k = instance.n_vertices, instance.n_labels
    # for a polyhedral loss with minimum zero a small-rho prox at the origin
    # is the projection of the origin onto the set of minimizers
    scores, _ = prox_batch(instance.loss, y, np.zeros((n, k)), 1e-3)
    if loss_rows(instance.loss, y, scores).max() > 1e-12:
        raise ValueError(f"{instance.loss.value} loss has no minimizer without regularization")
    alpha, _, ok = block_cg(instance.kernel.matvec, scores, np.zeros((n, k)), 1e-13, 10 * n)
    if not ok:
        alpha = np.linalg.solve(instance.kernel.to_dense(), scores)
    return alpha, np.zeros((n, k))


def coordinate_descent(instance, config: Optional[SolverConfig] = None, y0=None,
                       trace_sink: Optional[Callable[[IterationTrace], None]] = None,
                       inner_tol: float = 1e-10, diagnostics: bool = True) -> RunReport:
    """Alternate an exact supervised solve for ``alpha`` with an MRF step for ``y``.

    The supervised solve runs accelerated proximal gradient on the dual
    until the duality gap is below ``inner_tol`` (relative); the labeling
    step uses unaries ``l(c; K_i alpha)``.  Stops at a labeling fixed point
    or after ``config.max_iter`` sweeps.
    """
    config = config or SolverConfig()
    n, k = instance.n_vertices, instance.n_labels
    comp = instance.compiled
    solver = MrfSolver.parse(config.mrf_solver)
    if y0 is None:
        table0 = build_lookup_table(instance, np.zeros((n, k)), np.zeros((n, k)), config.rho0,
                                    threads=config.threads)
        y = initial_labeling(instance, config, table0)
    else:
        y = check_labeling(y0, n, k)
        if eval_total_energy(comp, y) == INF:
            y = repair_feasibility(MrfInstance(np.zeros((n, k)), comp), y, seed=config.seed)
    eig_max = instance.kernel.extreme_eigenvalues()[1]
    alpha = np.zeros((n, k))
    lam = None
    traces: List[IterationTrace] = []
    termination = Termination.MAX_ITER
    for t in range(1, config.max_iter + 1):
        start = time.perf_counter()
        alpha_new, lam = fit_alpha(instance, y, lam, tol=inner_tol, eig_max=eig_max)
        scores = instance.kernel.matvec(alpha_new)
        u = label_unaries(instance.loss, scores)
        y_new = solve_mrf(MrfInstance(u, comp), y, solver=solver,
                          seed=config.seed + t).labeling
        changed = int(np.count_nonzero(y_new != y))
        step = float(np.linalg.norm(alpha_new - alpha))
        alpha, y = alpha_new, y_new
        energy = eval_total_energy(comp, y)
        trace = IterationTrace(iteration=t, rho=0.0,
                               lagrangian_value=mixed_objective(instance, y, alpha),
                               primal_residual=0.0, alpha_step=step, labels_changed=changed,
                               descent_gate=Gate.ACCEPTED,
                               mrf_energy=float(u[np.arange(n), y].sum()) + energy,
                               wall_time=time.perf_counter() - start)
        traces.append(trace)
        if trace_sink is not None:
            trace_sink(trace)
        if changed == 0:
            termination = Termination.PRIMAL_CONVERGED
            break
    if traces and traces[-1].labels_changed:
        # labels moved in the last sweep; refit alpha so the state is consistent
        alpha, lam = fit_alpha(instance, y, lam, tol=inner_tol, eig_max=eig_max)
    lam = np.zeros((n, k)) if lam is None else lam
    state = SolverState(alpha, instance.kernel.matvec(alpha), lam, y, 0.0, len(traces))
    report = RunReport(final_state=state, traces=traces, termination=termination,
                       lagrangian_monotone_after_freeze=True,
                       supervised_optimality_gap=float("nan"))
    if diagnostics and traces and instance.nu > 0:
        fill_supervised_gap(instance, report, eig_max=eig_max)
    return report
