"""The supervised problem at a fixed labeling, its dual, and a dual solver.

For fixed labels ``y`` the training problem is

    P(a) = sum_i l(y_i; (K a)_i) + nu <a, K a>

with dual

    D(lam) = -sum_i l*(y_i; lam_i) - <lam, K lam> / (4 nu),

and primal recovery ``a = -lam / (2 nu)``.  ``P(a) - D(lam)`` bounds the
suboptimality of ``a`` from above.
"""

from __future__ import annotations

import numpy as np

from .core import LossKind, loss_rows
from .prox import project_simplex_fixing, prox_batch


def primal_objective(instance, y, alpha) -> float:
    k_alpha = instance.kernel.matvec(alpha)
    return float(loss_rows(instance.loss, y, k_alpha).sum()
                 + instance.nu * np.sum(alpha * k_alpha))


def _onehot(y, k):
    e = np.zeros((len(y), k))
    e[np.arange(len(y)), y] = 1.0
    return e


def project_dual_domain(loss, y, lam) -> np.ndarray:
    """Euclidean projection of each row onto the domain of the conjugate loss."""
    loss = LossKind.parse(loss)
    lam = np.asarray(lam, dtype=np.float64)
    e = _onehot(y, lam.shape[1])
    if loss is LossKind.HINGE:
        sign = 2.0 * e - 1.0
        return sign * np.clip(sign * lam, -1.0, 0.0)
    return project_simplex_fixing(lam + e) - e


def conjugate_rows(loss, y, lam) -> np.ndarray:
    """Row-wise conjugate ``l*(y_i; lam_i)``, assuming ``lam`` lies in its domain.

    Hinge: ``sum_j s_j lam_j`` on the box ``s_j lam_j in [-1, 0]``.
    Crammer-Singer: ``lam_y`` on ``lam + e_y`` in the simplex.
    Softmax: negative entropy of ``lam + e_y``.
    """
    loss = LossKind.parse(loss)
    e = _onehot(y, lam.shape[1])
    if loss is LossKind.HINGE:
        return ((2.0 * e - 1.0) * lam).sum(axis=1)
    if loss is LossKind.CRAMMER_SINGER:
        return lam[np.arange(len(y)), y]
    p = np.clip(lam + e, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(p > 0, p * np.log(p), 0.0)
    return ent.sum(axis=1)


def dual_objective(instance, y, lam) -> float:
    """Dual value at the projection of ``lam`` onto the conjugate domain."""
    lam = project_dual_domain(instance.loss, y, lam)
    quad = np.sum(lam * instance.kernel.matvec(lam))
    return float(-conjugate_rows(instance.loss, y, lam).sum() - quad / (4.0 * instance.nu))


def duality_gap(instance, y, alpha, lam) -> float:
    return primal_objective(instance, y, alpha) - dual_objective(instance, y, lam)


def _prox_conjugate(loss, y, v, t):
    # Moreau: prox_{t l*}(v) = v - t prox_{l/t}(v/t)
    beta, _ = prox_batch(loss, y, v / t, t)
    return v - t * beta


def solve_supervised(instance, y, lam0=None, tol: float = 1e-10,
                     max_iter: int = 50000, eig_max=None):
    """Minimize the supervised objective through its dual.

    Accelerated proximal gradient on ``-D`` with gradient-based adaptive
    restart; the conjugate prox comes from the primal prox by Moreau's
    identity.  Stops when the duality gap at ``a = -lam/(2 nu)`` is at
    most ``tol * (1 + |P|)``.

    Returns
    -------
    alpha : ndarray
    lam : ndarray
    gap : float
        Final duality gap.
    iterations : int
    """
    nu = instance.nu
    if not nu > 0:
        raise ValueError("the supervised solve needs nu > 0")
    n, k = instance.n_vertices, instance.n_labels
    y = np.asarray(y, dtype=np.int64)
    if eig_max is None:
        eig_max = instance.kernel.extreme_eigenvalues()[1]
    step = 2.0 * nu / eig_max
    lam = np.zeros((n, k)) if lam0 is None else project_dual_domain(instance.loss, y, lam0)
    z = lam.copy()
    theta = 1.0
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad = instance.kernel.matvec(z) / (2.0 * nu)
        new = _prox_conjugate(instance.loss, y, z - step * grad, step)
        if np.sum((z - new) * (new - lam)) > 0:
            # momentum points uphill: restart
            theta = 1.0
            z = lam.copy()
            continue
        theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        z = new + ((theta - 1.0) / theta_next) * (new - lam)
        lam, theta = new, theta_next
        if it % 10 == 0 or it == max_iter:
            alpha = -lam / (2.0 * nu)
            p = primal_objective(instance, y, alpha)
            gap = p - dual_objective(instance, y, lam)
            if gap <= tol * (1.0 + abs(p)):
                break
    alpha = -lam / (2.0 * nu)
    gap = duality_gap(instance, y, alpha, lam)
    return alpha, lam, gap, it
