"""Kernel matrices: construction, products, spectral constants, Nystrom."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, eigsh

logger = logging.getLogger(__name__)

DENSE_EIG_LIMIT = 2000
NYSTROM_FLOOR = 1e-10


class KernelNotSurjective(ValueError):
    """The (shifted) kernel matrix has no positive smallest eigenvalue."""


@dataclass(frozen=True)
class LinearSpec:
    pass


@dataclass(frozen=True)
class RBFSpec:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("RBF sigma must be positive")


@dataclass(frozen=True)
class PrecomputedSpec:
    matrix: np.ndarray


class KernelMatrix:
    """Symmetric kernel matrix, dense or low-rank, with diagonal shift.

    Dense kernels store the shifted matrix ``K + gamma*I``.  Low-rank
    kernels store a factor ``G`` and act as ``G G^T + gamma*I`` without
    forming the product.
    """

    def __init__(self, dense: Optional[np.ndarray] = None,
                 factor: Optional[np.ndarray] = None, gamma: float = 0.0):
        if (dense is None) == (factor is None):
            raise ValueError("give exactly one of dense or factor")
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.gamma = float(gamma)
        self.dense = None
        self.factor = None
        if dense is not None:
            dense = np.array(dense, dtype=np.float64)
            if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
                raise ValueError("kernel must be square")
            self.dense = dense
            self.dense.setflags(write=False)
        else:
            factor = np.array(factor, dtype=np.float64)
            if factor.ndim != 2 or factor.shape[1] > factor.shape[0]:
                raise ValueError("low-rank factor must be n x l with l <= n")
            self.factor = factor
            self.factor.setflags(write=False)
        self._eig = None

    @property
    def n(self) -> int:
        return (self.dense if self.dense is not None else self.factor).shape[0]

    @property
    def is_low_rank(self) -> bool:
        return self.factor is not None

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: kernel is {self.n}, operand {v.shape}")
        if self.dense is not None:
            return self.dense @ v
        return self.factor @ (self.factor.T @ v) + self.gamma * v

    def diagonal(self) -> np.ndarray:
        if self.dense is not None:
            return np.diag(self.dense).copy()
        return np.einsum("ij,ij->i", self.factor, self.factor) + self.gamma

    def row(self, i: int) -> np.ndarray:
        if self.dense is not None:
            return self.dense[i].copy()
        out = self.factor @ self.factor[i]
        out[i] += self.gamma
        return out

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense.copy()
        return self.factor @ self.factor.T + self.gamma * np.eye(self.n)

    def eigh(self):
        """Cached full eigendecomposition (dense path only)."""
        if self._eig is None:
            w, v = np.linalg.eigh(self.to_dense())
            self._eig = (w, v)
        return self._eig

    def extreme_eigenvalues(self):
        """Smallest and largest eigenvalue of the (shifted) kernel."""
        n = self.n
        if self.factor is not None:
            s = np.linalg.svd(self.factor, compute_uv=False)
            top = float(s[0] ** 2) + self.gamma if s.size else self.gamma
            low = self.gamma if self.factor.shape[1] < n else float(s[-1] ** 2) + self.gamma
            return low, top
        if n <= DENSE_EIG_LIMIT:
            w = scipy.linalg.eigvalsh(self.dense)
            return float(w[0]), float(w[-1])
        op = LinearOperator((n, n), matvec=self.matvec, dtype=np.float64)
        top = float(eigsh(op, k=1, which="LA", return_eigenvectors=False)[0])
        low = float(eigsh(self.dense, k=1, sigma=0.0, which="LM",
                          return_eigenvectors=False)[0])
        return low, top


def _sq_dists(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (z * z).sum(1)[None, :] - 2.0 * x @ z.T
    return np.maximum(d, 0.0)


def kernel_block(x: np.ndarray, z: np.ndarray, spec) -> np.ndarray:
    """Unshifted kernel values between rows of ``x`` and rows of ``z``."""
    if isinstance(spec, LinearSpec):
        return x @ z.T
    if isinstance(spec, RBFSpec):
        return np.exp(-_sq_dists(x, z) / (2.0 * spec.sigma ** 2))
    raise TypeError(f"cannot evaluate kernel block for {spec!r}")


def build_kernel(features, spec, gamma: float = 0.0) -> KernelMatrix:
    """Dense kernel matrix plus ``gamma`` on the diagonal.

    ``features`` holds one row per vertex; it is ignored for
    :class:`PrecomputedSpec`.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if isinstance(spec, PrecomputedSpec):
        k = np.array(spec.matrix, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ValueError("precomputed kernel must be square")
        asym = float(np.max(np.abs(k - k.T))) if k.size else 0.0
        if asym > 1e-8:
            raise ValueError(f"precomputed kernel is not symmetric (max asymmetry {asym:.3g})")
        k = 0.5 * (k + k.T)
    else:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-d array")
        k = kernel_block(x, x, spec)
        k = 0.5 * (k + k.T)
        if isinstance(spec, RBFSpec):
            np.fill_diagonal(k, 1.0)
    k[np.diag_indices_from(k)] += gamma
    return KernelMatrix(dense=k, gamma=gamma)


@dataclass(frozen=True)
class SpectralBounds:
    sigma_min_KtK: float
    lip_L: float
    semiconvexity_m: float
    eig_min: float
    eig_max: float


def spectral_bounds(kernel: KernelMatrix, nu: float) -> SpectralBounds:
    """Constants entering the penalty condition for ``f = nu <a, K a>``."""
    low, top = kernel.extreme_eigenvalues()
    if not low > 0:
        raise KernelNotSurjective(
            f"smallest kernel eigenvalue is {low:.3g}; kernel not surjective, increase gamma")
    return SpectralBounds(sigma_min_KtK=low * low, lip_L=2.0 * nu * top,
                          semiconvexity_m=0.0, eig_min=low, eig_max=top)


def nystrom_factor(features, spec, landmarks: int, seed=None,
                   gamma: float = 0.0) -> KernelMatrix:
    """Low-rank kernel ``G G^T`` from ``landmarks`` uniformly drawn points."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= landmarks <= n:
        raise ValueError(f"landmark count must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=landmarks, replace=False))
    c = kernel_block(x, x[idx], spec)
    w = kernel_block(x[idx], x[idx], spec)
    w = 0.5 * (w + w.T)
    evals, evecs = np.linalg.eigh(w)
    if evals.min() < NYSTROM_FLOOR:
        warnings.warn("Nystrom landmark block is rank deficient; eigenvalues floored",
                      RuntimeWarning, stacklevel=2)
    keep = evals > NYSTROM_FLOOR
    inv_sqrt = evecs[:, keep] / np.sqrt(evals[keep])
    factor = c @ inv_sqrt
    if factor.shape[1] == 0:
        factor = np.zeros((n, 1))
    return KernelMatrix(factor=factor, gamma=gamma)
