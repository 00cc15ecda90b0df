"""Per-vertex continuous subproblems and the lookup table built from them.

For a loss ``l(c; .)`` and target row ``t`` the prox subproblem is

    min_b  l(c; b) + (rho/2) ||b - t||^2 .

All solvers work on batches: ``targets`` has shape ``(m, k)`` and
``labels`` shape ``(m,)``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import LossKind, NumericFailure, loss_rows

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
_INNER_MAX_ITER = 100


# -- exact solvers ------------------------------------------------------------

def _hinge_prox(targets, labels, rho):
    m, k = targets.shape
    sign = -np.ones((m, k))
    sign[np.arange(m), labels] = 1.0
    p = sign * targets
    t = np.where(p > 1.0, p, np.where(p < 1.0 - 1.0 / rho, p + 1.0 / rho, 1.0))
    return sign * t


def project_simplex_fixing(v: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the unit simplex.

    Variable fixing: repeatedly compute the shift from the free
    coordinates and fix to zero those that fall below it.  At most ``k``
    rounds.
    """
    v = np.asarray(v, dtype=np.float64)
    free = np.ones(v.shape, dtype=bool)
    for _ in range(v.shape[1] + 1):
        n_free = free.sum(axis=1)
        theta = (np.where(free, v, 0.0).sum(axis=1) - 1.0) / n_free
        still = free & (v - theta[:, None] > 0.0)
        if np.array_equal(still, free):
            break
        # a row never loses all coordinates: its largest entry stays above theta
        free = still
    return np.where(free, v - theta[:, None], 0.0)


def _crammer_singer_prox(targets, labels, rho):
    m, k = targets.shape
    rows = np.arange(m)
    onehot = np.zeros((m, k))
    onehot[rows, labels] = 1.0
    margin = 1.0 - onehot
    p = project_simplex_fixing(onehot + rho * (margin + targets))
    return targets - (p - onehot) / rho


def _lambert_log(b, rho):
    """Solve ``z + exp(z)/rho = b`` elementwise (``exp(z) = rho*W(e^b/rho)``).

    Newton on ``s = log W`` for ``e^s + s = b - log(rho)``.
    """
    lw = b - np.log(rho)
    big = lw > 1.0
    s = np.where(big, np.log(np.where(big, lw - np.log(np.where(big, lw, 1.0)), 1.0)),
                 lw - 1.0)
    for _ in range(_INNER_MAX_ITER):
        es = np.exp(s)
        step = (es + s - lw) / (es + 1.0)
        s = s - step
        if np.all(np.abs(step) <= 1e-15 * (1.0 + np.abs(s))):
            break
    return s + np.log(rho)


def _softmax_prox(targets, labels, rho):
    """Scalar dual equation in the log-partition value, safeguarded Newton."""
    m, k = targets.shape
    rows = np.arange(m)
    onehot = np.zeros((m, k))
    onehot[rows, labels] = 1.0
    a = targets + onehot / rho
    shift = targets.max(axis=1)
    lse = shift + np.log(np.exp(targets - shift[:, None]).sum(axis=1))
    lo = lse - 1.0 / rho
    hi = lse + 1.0 / rho
    c = lse.copy()
    done = np.zeros(m, dtype=bool)
    for _ in range(NEWTON_MAX_ITER):
        z = _lambert_log(a - c[:, None], rho)
        p = np.exp(z)
        resid = p.sum(axis=1) - 1.0
        done = np.abs(resid) <= NEWTON_TOL
        if done.all():
            break
        # resid is decreasing in c
        lo = np.where(resid > 0, c, lo)
        hi = np.where(resid < 0, c, hi)
        slope = -(p / (1.0 + p / rho)).sum(axis=1)
        newton = c - resid / slope
        inside = (newton > lo) & (newton < hi) & np.isfinite(newton)
        c = np.where(done, c, np.where(inside, newton, 0.5 * (lo + hi)))
    else:
        z = _lambert_log(a - c[:, None], rho)
        p = np.exp(z)
        resid = p.sum(axis=1) - 1.0
        done = np.abs(resid) <= NEWTON_TOL
    if not done.all():
        bad = int(np.flatnonzero(~done)[0])
        raise NumericFailure(
            "softmax prox did not converge: target=%r label=%d rho=%r residual=%.3g"
            % (targets[bad].tolist(), int(labels[bad]), rho, resid[bad]))
    p = p / p.sum(axis=1, keepdims=True)
    return targets + (onehot - p) / rho


_SOLVERS = {
    LossKind.HINGE: _hinge_prox,
    LossKind.CRAMMER_SINGER: _crammer_singer_prox,
    LossKind.SOFTMAX: _softmax_prox,
}


def prox_objective(loss, labels, beta, targets, rho) -> np.ndarray:
    d = beta - targets
    return loss_rows(loss, labels, beta) + 0.5 * rho * np.einsum("ij,ij->i", d, d)


def prox_batch(loss, labels, targets, rho):
    """Minimizers and optimal values for a batch of prox subproblems."""
    loss = LossKind.parse(loss)
    if not rho > 0:
        raise ValueError("rho must be positive")
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if targets.ndim != 2 or labels.shape != (targets.shape[0],):
        raise ValueError("targets must be (m, k) and labels (m,)")
    beta = _SOLVERS[loss](targets, labels, float(rho))
    return beta, prox_objective(loss, labels, beta, targets, rho)


def prox_step(loss, c_label: int, target, rho: float):
    """Exact minimizer and value of one prox subproblem."""
    target = np.asarray(target, dtype=np.float64)
    beta, value = prox_batch(loss, np.array([c_label]), target[None, :], rho)
    return beta[0], float(value[0])


def kkt_residual(loss, c_label: int, beta, target, rho: float) -> float:
    """Distance from ``rho*(target - beta)`` to the loss subdifferential at ``beta``."""
    from .admm import subgradient_distance  # local import avoids a cycle
    g = rho * (np.asarray(target) - np.asarray(beta))
    return float(subgradient_distance(loss, np.array([c_label]), np.asarray(beta)[None, :],
                                      g[None, :])[0])


# -- lookup table -----------------------------------------------------------

@dataclass
class LookupTable:
    """Optimal prox values ``u[i, c]`` and minimizers ``B[i, c, :]``."""

    u: np.ndarray
    B: np.ndarray
    targets: np.ndarray
    rho: float

    def beta_for(self, y: np.ndarray) -> np.ndarray:
        return self.B[np.arange(len(y)), y].copy()

    def unary_sum(self, y: np.ndarray) -> float:
        return float(self.u[np.arange(len(y)), y].sum())


def _table_rows(loss, targets, rho):
    n, k = targets.shape
    reps = np.repeat(targets, k, axis=0)
    labels = np.tile(np.arange(k), n)
    beta, value = prox_batch(loss, labels, reps, rho)
    return value.reshape(n, k), beta.reshape(n, k, k)


def default_threads() -> int:
    return os.cpu_count() or 1


def build_lookup_table(instance, alpha, lam, rho, threads=None,
                       chunk: int = 512) -> LookupTable:
    """Solve all ``|V|*|L|`` prox subproblems around ``K alpha + lam/rho``."""
    targets = instance.kernel.matvec(alpha) + lam / rho
    n, k = targets.shape
    u = np.empty((n, k))
    B = np.empty((n, k, k))
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def work(span):
        s, e = span
        u[s:e], B[s:e] = _table_rows(instance.loss, targets[s:e], rho)

    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(bounds) <= 1:
        for span in bounds:
            work(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, bounds))
    return LookupTable(u=u, B=B, targets=targets, rho=float(rho))


# -- brute-force oracle ---------------------------------------------------

def _loss_subgradient(loss, labels, beta):
    m, k = beta.shape
    rows = np.arange(m)
    if loss is LossKind.HINGE:
        sign = -np.ones((m, k))
        sign[rows, labels] = 1.0
        return np.where(1.0 - sign * beta > 0, -sign, 0.0)
    onehot = np.zeros((m, k))
    onehot[rows, labels] = 1.0
    if loss is LossKind.CRAMMER_SINGER:
        score = beta + 1.0 - onehot
        g = np.zeros((m, k))
        g[rows, score.argmax(axis=1)] = 1.0
        return g - onehot
    e = np.exp(beta - beta.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True) - onehot


def _golden_coordinate_sweeps(loss, labels, beta, targets, rho, sweeps, radius):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    m, k = beta.shape
    for _ in range(sweeps):
        for j in range(k):
            lo = beta[:, j] - radius
            hi = beta[:, j] + radius
            for _ in range(60):
                x1 = hi - invphi * (hi - lo)
                x2 = lo + invphi * (hi - lo)
                b1 = beta.copy()
                b1[:, j] = x1
                b2 = beta.copy()
                b2[:, j] = x2
                f1 = prox_objective(loss, labels, b1, targets, rho)
                f2 = prox_objective(loss, labels, b2, targets, rho)
                left = f1 < f2
                hi = np.where(left, x2, hi)
                lo = np.where(left, lo, x1)
            cand = beta.copy()
            cand[:, j] = 0.5 * (lo + hi)
            better = (prox_objective(loss, labels, cand, targets, rho)
                      < prox_objective(loss, labels, beta, targets, rho))
            beta[better] = cand[better]
    return beta


def _smoothed_pieces(loss, labels, beta, mu):
    """Value, gradient and Hessian of a log-sum-exp smoothing of the loss."""
    m, k = beta.shape
    rows = np.arange(m)
    onehot = np.zeros((m, k))
    onehot[rows, labels] = 1.0
    if loss is LossKind.HINGE:
        sign = 1.0 - 2.0 * (1.0 - onehot)
        r = (1.0 - sign * beta) / mu
        val = mu * np.logaddexp(0.0, r).sum(axis=1)
        s = 0.5 * (1.0 + np.tanh(0.5 * r))
        grad = -sign * s
        hess = np.zeros((m, k, k))
        hess[:, np.arange(k), np.arange(k)] = s * (1.0 - s) / mu
        return val, grad, hess
    if loss is LossKind.CRAMMER_SINGER:
        z = (beta + 1.0 - onehot) / mu
    else:
        z = beta / mu
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=1, keepdims=True)
    val = mu * (zmax[:, 0] + np.log(e.sum(axis=1))) - beta[rows, labels]
    grad = p - onehot
    hess = (p[:, :, None] * np.eye(k)[None] - p[:, :, None] * p[:, None, :]) / mu
    return val, grad, hess


def _smoothing_newton(loss, labels, beta, targets, rho):
    # softmax is already smooth: mu = 1 reproduces it exactly
    smooth_mu = [1.0] if loss is LossKind.SOFTMAX else [10.0 ** -e for e in range(13)]
    m, k = beta.shape
    eye = np.eye(k)[None]
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (m,))
    r = rho[:, None]
    for mu in smooth_mu:
        for _ in range(100):
            val, grad, hess = _smoothed_pieces(loss, labels, beta, mu)
            d = beta - targets
            f = val + 0.5 * rho * (d * d).sum(axis=1)
            g = grad + r * d
            h = hess + r[:, :, None] * eye
            step = np.linalg.solve(h, g[:, :, None])[:, :, 0]
            t = np.ones(m)
            for _ in range(60):
                cand = beta - t[:, None] * step
                vc, _, _ = _smoothed_pieces(loss, labels, cand, mu)
                dc = cand - targets
                fc = vc + 0.5 * rho * (dc * dc).sum(axis=1)
                ok = fc <= f - 1e-4 * t * (g * step).sum(axis=1) + 1e-15 * np.abs(f)
                if ok.all():
                    break
                t = np.where(ok, t, 0.5 * t)
            beta = beta - t[:, None] * step
            if np.max(np.abs(t[:, None] * step)) < 1e-14:
                break
    return beta


def prox_oracle_batch(loss, labels, targets, rho, iterations: int = 100_000,
                      sweeps: int = 30):
    """Slow, solver-independent reference for :func:`prox_batch`.

    Projected subgradient descent on the box that must contain the
    minimizer, with ``2/(rho*(t+1))`` steps and weighted averaging, then
    golden-section coordinate sweeps.  Because coordinate sweeps stall on
    the nondifferentiable ridges of the max-type losses, a log-sum-exp
    smoothing continuation with damped Newton is run from the same start;
    the better of the two points is returned.
    """
    loss = LossKind.parse(loss)
    targets = np.asarray(targets, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), labels.shape).copy()
    r = rho[:, None]
    lo = targets - 1.0 / r
    hi = targets + 1.0 / r
    x = targets.copy()
    avg = np.zeros_like(x)
    weight = 0.0
    for it in range(iterations):
        g = _loss_subgradient(loss, labels, x) + r * (x - targets)
        x = np.clip(x - (2.0 / (r * (it + 2))) * g, lo, hi)
        weight += it + 1
        avg += (it + 1) / weight * (x - avg)
    radius = 1.0 / rho
    polished = _golden_coordinate_sweeps(loss, labels, avg.copy(), targets, r[:, 0],
                                         sweeps, radius)
    smooth = _smoothing_newton(loss, labels, avg.copy(), targets, r[:, 0])
    fp = prox_objective(loss, labels, polished, targets, r[:, 0])
    fs = prox_objective(loss, labels, smooth, targets, r[:, 0])
    best = np.where((fs < fp)[:, None], smooth, polished)
    return best, np.minimum(fp, fs)


def prox_oracle(loss, c_label: int, target, rho: float, iterations: int = 100_000):
    target = np.asarray(target, dtype=np.float64)
    beta, value = prox_oracle_batch(loss, np.array([c_label]), target[None, :],
                                    np.array([rho]), iterations=iterations)
    return beta[0], float(value[0])
