"""Shared instance factories for the test suite."""

import numpy as np

from dcadmm import (BalanceClique, LossKind, PairwisePotts, ProblemInstance, RBFSpec,
                    UnaryClamp, build_kernel)
from dcadmm.core import compile_energies
from dcadmm.mrf import MrfInstance

LOSSES = [LossKind.HINGE, LossKind.CRAMMER_SINGER, LossKind.SOFTMAX]


def random_spd(rng, n, floor=0.1):
    a = rng.normal(size=(n, n))
    return a @ a.T / n + floor * np.eye(n)


def random_cliques(rng, truth, n_labels, n_cliques, size, slack):
    n = len(truth)
    out = []
    for _ in range(n_cliques):
        members = rng.choice(n, size=min(size, n), replace=False)
        counts = np.bincount(truth[members], minlength=n_labels)
        out.append(BalanceClique(tuple(int(m) for m in members),
                                 tuple(int(v) for v in np.maximum(counts - slack, 0)),
                                 tuple(int(v) for v in np.minimum(counts + slack, len(members)))))
    return out


def random_problem(seed, n=None, k=None, loss=None, nu=None, potts=False, cliques=True,
                   clamps=False, gamma=0.3):
    """Small clustered instance with optional balance cliques, Potts edges and clamps."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(8, 25))
    k = k or int(rng.integers(2, 4))
    loss = loss or LOSSES[seed % 3]
    nu = nu if nu is not None else float(rng.choice([0.01, 0.05, 0.2]))
    truth = rng.integers(0, k, size=n)
    centers = rng.normal(scale=2.0, size=(k, 2))
    x = centers[truth] + rng.normal(scale=0.6, size=(n, 2))
    kernel = build_kernel(x, RBFSpec(1.0), gamma)
    terms = []
    if cliques:
        terms += random_cliques(rng, truth, k, int(rng.integers(1, 4)),
                                int(rng.integers(4, max(5, n // 2))), int(rng.integers(1, 3)))
    if potts:
        for _ in range(n):
            i, j = rng.choice(n, 2, replace=False)
            terms.append(PairwisePotts(int(i), int(j), float(rng.uniform(0.01, 0.2))))
    if clamps:
        for v in rng.choice(n, size=2, replace=False):
            terms.append(UnaryClamp(int(v), int(truth[v])))
    return ProblemInstance(kernel, k, loss, terms, nu=nu), truth


def random_mrf(rng, n, k, potts=0, cliques=0, slack=1, clique_size=None, nonneg=True):
    """Random MRF with ``potts`` edges and ``cliques`` balance cliques feasible at a hidden truth."""
    truth = rng.integers(0, k, size=n)
    terms = []
    for _ in range(potts):
        i, j = rng.choice(n, 2, replace=False)
        terms.append(PairwisePotts(int(i), int(j), float(rng.uniform(0.0, 1.0))))
    if cliques:
        terms += random_cliques(rng, truth, k, cliques, clique_size or max(2, n // 2), slack)
    u = rng.random((n, k)) if nonneg else rng.normal(size=(n, k))
    return MrfInstance(u, compile_energies(terms, n, k)), truth
