"""Discrete-continuous ADMM driver and its convergence diagnostics.

One iteration, with ``rho`` held fixed throughout:

1. lookup table ``(u, B)`` around ``K alpha + lam/rho``;
2. MRF proposal over the unaries ``u`` plus the energy terms;
3. descent gate: keep the previous labeling unless the proposal lowers
   the augmented Lagrangian by at least ``delta``;
4. ``beta_i = B[i, y_i]``;
5. consensus update of ``alpha`` by conjugate gradients;
6. dual ascent on ``lam``;
7. penalty schedule ``rho <- min(rho_target, tau * rho)``.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .core import (INF, Gate, LossKind, MrfSolver, NumericFailure, SolverConfig,
                   SolverState, Termination, IterationTrace, check_labeling,
                   eval_augmented_lagrangian, eval_total_energy)
from .kernel import KernelNotSurjective, spectral_bounds
from .mrf import MrfInstance, descent_gate, repair_feasibility, solve_mrf
from .prox import build_lookup_table, project_simplex_fixing
from .supervised import dual_objective, primal_objective, solve_supervised

logger = logging.getLogger(__name__)

RHO_MARGIN = 1.01
MONOTONE_RTOL = 1e-8


# -- penalty condition ------------------------------------------------------

def penalty_condition_lhs(rho, lip_L, m, s):
    """Left side of the penalty condition; negative means ``rho`` is large enough."""
    return lip_L ** 2 / (rho * s) + (m - rho * s) / 2.0


def compute_rho_threshold(bounds=None, *, lip_L=None, m=None, s=None) -> float:
    """Smallest ``rho`` beyond which the penalty condition holds strictly.

    Positive root of ``rho^2 s^2 - rho s m - 2 L^2``.  Accepts a
    :class:`~dcadmm.kernel.SpectralBounds` or the three constants as
    keywords.
    """
    if bounds is not None:
        lip_L, m, s = bounds.lip_L, bounds.semiconvexity_m, bounds.sigma_min_KtK
    if not s > 0:
        raise KernelNotSurjective("sigma_min(K^T K) must be positive; kernel not "
                                  "surjective, increase gamma")
    root = (m + math.sqrt(m * m + 8.0 * lip_L * lip_L)) / (2.0 * s)
    if lip_L == 0:
        return root
    # the root itself evaluates to ~0; step up to the first float where it is negative
    rho = root
    for _ in range(1000):
        if penalty_condition_lhs(rho, lip_L, m, s) < 0:
            break
        rho = math.nextafter(rho, math.inf) if rho > 0 else math.ulp(0.0)
    return rho


def rho_target(threshold: float, config: SolverConfig) -> float:
    override = config.rho_max_override or 0.0
    return max(RHO_MARGIN * threshold, override, config.rho0)


def penalty_schedule_step(rho_t: float, tau: float, rho_target: float) -> float:
    if rho_t < rho_target:
        return min(rho_target, tau * rho_t)
    return rho_t


# -- consensus and dual steps --------------------------------------------------

def block_cg(apply, b, x0, tol: float, max_iter: int):
    """Conjugate gradients run column by column in lockstep.

    Returns ``(x, iterations, converged)``.  Raises
    :class:`~dcadmm.core.NumericFailure` on a non-positive curvature step.
    """
    x = np.array(x0, dtype=np.float64)
    r = b - apply(x)
    p = r.copy()
    rs = np.sum(r * r, axis=0)
    target = tol * np.linalg.norm(b, axis=0)
    active = np.sqrt(rs) > target
    it = 0
    while active.any() and it < max_iter:
        ap = apply(p)
        curv = np.sum(p * ap, axis=0)
        if not np.all(np.isfinite(curv)) or (curv[active] <= 0).any():
            raise NumericFailure("conjugate gradient breakdown: the consensus operator is "
                                 "not positive definite; increase gamma")
        step = np.where(active, rs / np.where(active, curv, 1.0), 0.0)
        x += step * p
        r -= step * ap
        rs_new = np.sum(r * r, axis=0)
        ratio = np.where(active, rs_new / np.where(active, rs, 1.0), 0.0)
        p = r + ratio * p
        rs = rs_new
        active = np.sqrt(rs) > target
        it += 1
    return x, it, not active.any()


def consensus_update(kernel, nu, beta, lam, rho, alpha_warm=None,
                     cg_tol: float = 1e-10, cg_max_iter: int = 2000):
    """``alpha`` minimizing ``nu <a, K a> + (rho/2) ||K a - beta + lam/rho||^2``.

    The stationarity system ``(2 nu K + rho K^2) a = K (rho beta - lam)``
    shares its solutions with ``(2 nu I + rho K) a = rho beta - lam`` when
    ``K`` is nonsingular; CG runs on the latter, which is far better
    conditioned.
    """
    b = rho * np.asarray(beta, dtype=np.float64) - lam
    x0 = np.zeros_like(b) if alpha_warm is None else alpha_warm

    def apply(v):
        return 2.0 * nu * v + rho * kernel.matvec(v)

    alpha, it, ok = block_cg(apply, b, x0, cg_tol, cg_max_iter)
    if not ok:
        logger.debug("CG stopped at the iteration cap (%d)", cg_max_iter)
    return alpha


def dual_update(lam, kernel, alpha, beta, rho):
    return lam + rho * (kernel.matvec(alpha) - beta)


# -- critical-point diagnostics ----------------------------------------------

def subgradient_distance(loss, labels, beta, g, kink_tol: float = 1e-9) -> np.ndarray:
    """Row-wise distance from ``g`` to the loss subdifferential at ``beta``.

    A hinge or max term counts as active when it is within ``kink_tol``
    (relative to the row scale) of its kink.
    """
    loss = LossKind.parse(loss)
    beta = np.asarray(beta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    m, k = beta.shape
    rows = np.arange(m)
    e = np.zeros((m, k))
    e[rows, labels] = 1.0
    tol = kink_tol * (1.0 + np.abs(beta).max(axis=1, keepdims=True))
    if loss is LossKind.HINGE:
        s = 2.0 * e - 1.0
        margin = s * beta
        # per coordinate: {-s} below the kink, {0} above, s*[-1, 0] at it
        lo = np.where(margin < 1.0 - tol, -1.0, np.where(margin > 1.0 + tol, 0.0, -1.0))
        hi = np.where(margin < 1.0 - tol, -1.0, 0.0)
        sg = s * g
        d = np.maximum(lo - sg, 0.0) + np.maximum(sg - hi, 0.0)
        return np.sqrt((d * d).sum(axis=1))
    if loss is LossKind.CRAMMER_SINGER:
        score = beta + 1.0 - e
        active = score >= score.max(axis=1, keepdims=True) - tol
        q = g + e
        # inactive coordinates pushed far below so the projection zeroes them
        proj = np.where(active, project_simplex_fixing(np.where(active, q, -1e30)), 0.0)
        return np.sqrt(((q - proj) ** 2).sum(axis=1))
    shift = beta.max(axis=1, keepdims=True)
    p = np.exp(beta - shift)
    p /= p.sum(axis=1, keepdims=True)
    return np.sqrt(((g - (p - e)) ** 2).sum(axis=1))


@dataclass
class CriticalPointResiduals:
    subgradient: float
    stationarity: float
    primal: float

    def max(self) -> float:
        return max(self.subgradient, self.stationarity, self.primal)


def critical_point_residuals(instance, state: SolverState) -> CriticalPointResiduals:
    """Scaled residuals of the discrete-continuous critical-point conditions.

    ``subgradient``: largest row distance of ``lam_i`` to the loss
    subdifferential at ``beta_i``.  ``stationarity``:
    ``||2 nu K alpha + K lam||_F / (1 + ||K lam||_F)``.  ``primal``:
    ``||K alpha - beta||_F / sqrt(|V| |L|)``.
    """
    k_alpha = instance.kernel.matvec(state.alpha)
    k_lam = instance.kernel.matvec(state.lam)
    sub = subgradient_distance(instance.loss, state.y, state.beta, state.lam)
    stat = np.linalg.norm(2.0 * instance.nu * k_alpha + k_lam) / (1.0 + np.linalg.norm(k_lam))
    primal = np.linalg.norm(k_alpha - state.beta) / math.sqrt(state.beta.size)
    return CriticalPointResiduals(float(sub.max(initial=0.0)), float(stat), float(primal))


# -- driver ------------------------------------------------------------------

@dataclass
class RunReport:
    final_state: SolverState
    traces: List[IterationTrace]
    termination: Termination
    lagrangian_monotone_after_freeze: bool
    supervised_optimality_gap: float
    duality_gap: float = float("nan")
    supervised_objective: float = float("nan")
    rho_target: float = float("nan")
    freeze_iteration: Optional[int] = None
    monotonicity_violations: List[int] = field(default_factory=list)
    residuals: Optional[CriticalPointResiduals] = None
    final_steps: dict = field(default_factory=dict)
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.traces)


def default_mrf_backend(solver, base_seed):
    # no ICM restarts: each call is warm-started from the previous iterate
    def backend(mrf, warm_start, iteration):
        return solve_mrf(mrf, warm_start, solver=solver, seed=base_seed + iteration,
                         restarts=0).labeling
    return backend


def initial_labeling(instance, config: SolverConfig, table) -> np.ndarray:
    """Per-vertex argmin of the unaries, repaired to satisfy hard terms."""
    mrf = MrfInstance(table.u, instance.compiled)
    y = np.argmin(np.where(instance.compiled.allowed, table.u, np.inf), axis=1)
    if eval_total_energy(instance.compiled, y) == INF:
        y = repair_feasibility(mrf, y, seed=config.seed)
    return y


def monotone_violations(traces, rho_target_value, rtol=MONOTONE_RTOL):
    """Iterations whose Lagrangian exceeds the previous one with ``rho`` frozen."""
    bad = []
    for prev, cur in zip(traces, traces[1:]):
        if prev.rho == rho_target_value and cur.rho == rho_target_value:
            if cur.lagrangian_value > prev.lagrangian_value + rtol * (1.0 + abs(prev.lagrangian_value)):
                bad.append(cur.iteration)
    return bad


def run(instance, config: Optional[SolverConfig] = None, y0=None, alpha0=None,
        lambda0=None, mrf_backend: Optional[Callable] = None,
        trace_sink: Optional[Callable[[IterationTrace], None]] = None,
        diagnostics: bool = True) -> RunReport:
    """Run discrete-continuous ADMM from ``(y0, alpha0, lambda0)``.

    Parameters
    ----------
    mrf_backend
        ``backend(mrf, warm_start, iteration) -> labeling``; replaces the
        configured MRF solver (used to inject adversarial proposals).
    trace_sink
        Called with every :class:`IterationTrace` as it is produced.
    diagnostics
        Compute critical-point residuals and the supervised optimality gap
        after termination.
    """
    config = config or SolverConfig()
    kernel = instance.kernel
    n, k = instance.n_vertices, instance.n_labels
    comp = instance.compiled
    bounds = spectral_bounds(kernel, instance.nu)
    threshold = compute_rho_threshold(bounds)
    target = rho_target(threshold, config)
    logger.info("rho threshold %.6g, target %.6g", threshold, target)
    if mrf_backend is None:
        solver = MrfSolver.parse(config.mrf_solver)
        mrf_backend = default_mrf_backend(solver, config.seed)

    alpha = np.zeros((n, k)) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    lam = np.zeros((n, k)) if lambda0 is None else np.array(lambda0, dtype=np.float64)
    rho = float(config.rho0)
    if y0 is None:
        table0 = build_lookup_table(instance, alpha, lam, rho, threads=config.threads)
        y = initial_labeling(instance, config, table0)
    else:
        y = check_labeling(y0, n, k)
        if eval_total_energy(comp, y) == INF:
            y = repair_feasibility(MrfInstance(np.zeros((n, k)), comp), y, seed=config.seed)
    beta = kernel.matvec(alpha)
    state = SolverState(alpha, beta, lam, y, rho, 0)

    traces: List[IterationTrace] = []
    stable = 0
    termination = Termination.MAX_ITER
    message = ""
    scale = math.sqrt(n * k)
    freeze_iteration = None
    steps = {}
    for t in range(1, config.max_iter + 1):
        start = time.perf_counter()
        rho = state.rho
        frozen = rho >= target
        if frozen and freeze_iteration is None:
            freeze_iteration = t
        try:
            table = build_lookup_table(instance, state.alpha, state.lam, rho,
                                       threads=config.threads)
            mrf = MrfInstance(table.u, comp)
            proposal = check_labeling(mrf_backend(mrf, state.y, t), n, k)
            gate = descent_gate(table, comp, state.y, proposal, config.delta)
            y_new = proposal if gate is Gate.ACCEPTED else state.y
            beta_new = table.beta_for(y_new)
            alpha_new = consensus_update(kernel, instance.nu, beta_new, state.lam, rho,
                                         state.alpha, config.cg_tol, config.cg_max_iter)
            lam_new = dual_update(state.lam, kernel, alpha_new, beta_new, rho)
        except NumericFailure as exc:
            termination = Termination.NUMERIC_FAILURE
            message = str(exc)
            logger.error("numeric failure at iteration %d: %s", t, exc)
            break
        changed = int(np.count_nonzero(y_new != state.y))
        alpha_step = float(np.linalg.norm(alpha_new - state.alpha))
        steps = {"alpha": alpha_step,
                 "beta": float(np.linalg.norm(beta_new - state.beta)),
                 "lambda": float(np.linalg.norm(lam_new - state.lam))}
        state = SolverState(alpha_new, beta_new, lam_new, y_new, rho, t)
        value = eval_augmented_lagrangian(instance, state)
        if not math.isfinite(value):
            raise RuntimeError(f"augmented Lagrangian is {value} at iteration {t}: "
                               "a hard energy term is violated")
        resid = float(np.linalg.norm(kernel.matvec(alpha_new) - beta_new))
        energy = eval_total_energy(comp, y_new)
        trace = IterationTrace(iteration=t, rho=rho, lagrangian_value=value,
                               primal_residual=resid, alpha_step=alpha_step,
                               labels_changed=changed, descent_gate=gate,
                               mrf_energy=table.unary_sum(y_new) + energy,
                               wall_time=time.perf_counter() - start)
        traces.append(trace)
        if trace_sink is not None:
            trace_sink(trace)
        stable = stable + 1 if changed == 0 else 0
        if (frozen and resid / scale <= config.primal_tol
                and alpha_step / scale <= config.step_tol and stable >= config.stable_iters):
            termination = Termination.PRIMAL_CONVERGED
            break
        state.rho = penalty_schedule_step(rho, config.tau, target)

    violations = monotone_violations(traces, target)
    if violations:
        warnings.warn(f"augmented Lagrangian increased after the penalty froze at "
                      f"{len(violations)} iteration(s); prox or CG tolerance too loose",
                      RuntimeWarning, stacklevel=2)
    report = RunReport(final_state=state, traces=traces, termination=termination,
                       lagrangian_monotone_after_freeze=not violations,
                       supervised_optimality_gap=float("nan"), rho_target=target,
                       freeze_iteration=freeze_iteration, monotonicity_violations=violations,
                       final_steps=steps, message=message)
    if diagnostics and traces and termination is not Termination.NUMERIC_FAILURE:
        report.residuals = critical_point_residuals(instance, state)
        if instance.nu > 0:
            fill_supervised_gap(instance, report, eig_max=bounds.eig_max)
    return report


def fill_supervised_gap(instance, report: RunReport, eig_max=None):
    """Compare ``alpha_final`` with a fresh supervised solve at ``y_final``.

    ``supervised_optimality_gap`` is the objective difference to the fresh
    solution; ``duality_gap`` is ``P(alpha_final)`` minus the best dual value
    seen, an upper bound on the true suboptimality.
    """
    st = report.final_state
    p_final = primal_objective(instance, st.y, st.alpha)
    alpha_ref, lam_ref, _, _ = solve_supervised(instance, st.y, lam0=st.lam, eig_max=eig_max)
    p_ref = primal_objective(instance, st.y, alpha_ref)
    d_best = max(dual_objective(instance, st.y, st.lam), dual_objective(instance, st.y, lam_ref))
    report.supervised_objective = p_final
    report.supervised_optimality_gap = p_final - p_ref
    report.duality_gap = p_final - d_best
