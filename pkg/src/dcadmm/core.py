"""Domain types and objective evaluation.

Labelings are integer arrays of length ``n_vertices``; score matrices
(``alpha``, ``beta``, ``lam``) are float arrays of shape
``(n_vertices, n_labels)``.  Infinite energies are ``math.inf``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

INF = math.inf


class LossKind(str, enum.Enum):
    HINGE = "hinge"
    CRAMMER_SINGER = "crammer_singer"
    SOFTMAX = "softmax"

    @classmethod
    def parse(cls, value: Union[str, "LossKind"]) -> "LossKind":
        if isinstance(value, cls):
            return value
        aliases = {
            "hinge": cls.HINGE, "ova": cls.HINGE, "one_vs_all": cls.HINGE,
            "onevsallhinge": cls.HINGE,
            "crammer_singer": cls.CRAMMER_SINGER, "cs": cls.CRAMMER_SINGER,
            "crammersinger": cls.CRAMMER_SINGER,
            "softmax": cls.SOFTMAX, "logistic": cls.SOFTMAX,
        }
        key = str(value).strip().lower().replace("-", "_")
        if key not in aliases:
            raise ValueError(f"unknown loss {value!r}")
        return aliases[key]


class MrfSolver(str, enum.Enum):
    ICM = "icm"
    ALPHA_EXPANSION = "alpha_expansion"
    EXHAUSTIVE = "exhaustive"

    @classmethod
    def parse(cls, value: Union[str, "MrfSolver"]) -> "MrfSolver":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"icm": cls.ICM, "alphaexpansion": cls.ALPHA_EXPANSION,
                   "alpha_expansion": cls.ALPHA_EXPANSION,
                   "expansion": cls.ALPHA_EXPANSION,
                   "exhaustive": cls.EXHAUSTIVE}
        if key not in aliases:
            raise ValueError(f"unknown MRF solver {value!r}")
        return aliases[key]


class Gate(str, enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


class Termination(str, enum.Enum):
    PRIMAL_CONVERGED = "primal_converged"
    MAX_ITER = "max_iter"
    NUMERIC_FAILURE = "numeric_failure"


class NumericFailure(RuntimeError):
    """A numerical subroutine failed in a way the caller cannot repair."""


# -- energy terms -----------------------------------------------------------

@dataclass(frozen=True)
class UnaryClamp:
    vertex: int
    label: int


@dataclass(frozen=True)
class PairwisePotts:
    i: int
    j: int
    weight: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("Potts edge needs two distinct vertices")
        if not self.weight >= 0:
            raise ValueError(f"Potts weight must be nonnegative, got {self.weight}")


@dataclass(frozen=True)
class BalanceClique:
    members: tuple
    lower: tuple
    upper: tuple

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        lower = tuple(int(v) for v in self.lower)
        upper = tuple(int(v) for v in self.upper)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        size = len(members)
        if len(set(members)) != size:
            raise ValueError("clique members must be distinct")
        if len(lower) != len(upper):
            raise ValueError("lower/upper length mismatch")
        for lo, up in zip(lower, upper):
            if not 0 <= lo <= up <= size:
                raise ValueError(f"invalid clique bounds ({lo}, {up}) for size {size}")
        if sum(lower) > size or sum(upper) < size:
            raise ValueError("clique bounds are infeasible")


EnergyTerm = Union[UnaryClamp, PairwisePotts, BalanceClique]


@dataclass
class CompiledEnergies:
    """Array form of a list of energy terms, as consumed by the MRF kernels.

    ``allowed[i, c]`` is False when a clamp forbids label ``c`` at vertex
    ``i``.  Potts edges are stored twice in CSR adjacency form
    (``adj_ptr``/``adj_idx``/``adj_w``) and once as edge arrays.  Clique
    membership is stored per clique (``clq_ptr``/``clq_idx``) and per
    vertex (``vcl_ptr``/``vcl_idx``).
    """

    n_vertices: int
    n_labels: int
    allowed: np.ndarray
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_w: np.ndarray
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    adj_w: np.ndarray
    clq_ptr: np.ndarray
    clq_idx: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    vcl_ptr: np.ndarray
    vcl_idx: np.ndarray

    @property
    def n_cliques(self) -> int:
        return len(self.clq_ptr) - 1

    @property
    def has_cliques(self) -> bool:
        return self.n_cliques > 0

    @property
    def has_clamps(self) -> bool:
        return not bool(self.allowed.all())

    def clique_counts(self, y: np.ndarray) -> np.ndarray:
        counts = np.zeros((self.n_cliques, self.n_labels), dtype=np.int64)
        if self.n_cliques:
            owner = np.repeat(np.arange(self.n_cliques), np.diff(self.clq_ptr))
            np.add.at(counts, (owner, y[self.clq_idx]), 1)
        return counts


def compile_energies(terms: Sequence[EnergyTerm], n_vertices: int,
                     n_labels: int) -> CompiledEnergies:
    allowed = np.ones((n_vertices, n_labels), dtype=bool)
    ei, ej, ew = [], [], []
    cliques = []
    for term in terms:
        if isinstance(term, UnaryClamp):
            _check_index(term.vertex, n_vertices, "clamp vertex")
            _check_index(term.label, n_labels, "clamp label")
            row = np.zeros(n_labels, dtype=bool)
            row[term.label] = True
            allowed[term.vertex] &= row
            if not allowed[term.vertex].any():
                raise ValueError(f"conflicting clamps at vertex {term.vertex}")
        elif isinstance(term, PairwisePotts):
            _check_index(term.i, n_vertices, "Potts vertex")
            _check_index(term.j, n_vertices, "Potts vertex")
            ei.append(term.i)
            ej.append(term.j)
            ew.append(float(term.weight))
        elif isinstance(term, BalanceClique):
            if len(term.lower) != n_labels:
                raise ValueError("clique bound vectors must have n_labels entries")
            for m in term.members:
                _check_index(m, n_vertices, "clique member")
            cliques.append(term)
        else:
            raise TypeError(f"unknown energy term {term!r}")

    edge_i = np.asarray(ei, dtype=np.int64)
    edge_j = np.asarray(ej, dtype=np.int64)
    edge_w = np.asarray(ew, dtype=np.float64)
    adj_ptr, adj_idx, adj_w = _symmetric_csr(edge_i, edge_j, edge_w, n_vertices)

    sizes = [len(c.members) for c in cliques]
    clq_ptr = np.zeros(len(cliques) + 1, dtype=np.int64)
    clq_ptr[1:] = np.cumsum(sizes)
    clq_idx = np.asarray([m for c in cliques for m in c.members], dtype=np.int64)
    lower = np.asarray([c.lower for c in cliques], dtype=np.int64).reshape(-1, n_labels)
    upper = np.asarray([c.upper for c in cliques], dtype=np.int64).reshape(-1, n_labels)
    owner = np.repeat(np.arange(len(cliques), dtype=np.int64), sizes)
    order = np.argsort(clq_idx, kind="stable")
    vcl_idx = owner[order]
    vcl_ptr = np.zeros(n_vertices + 1, dtype=np.int64)
    vcl_ptr[1:] = np.cumsum(np.bincount(clq_idx, minlength=n_vertices))
    return CompiledEnergies(n_vertices, n_labels, allowed, edge_i, edge_j, edge_w,
                            adj_ptr, adj_idx, adj_w, clq_ptr, clq_idx, lower, upper,
                            vcl_ptr, vcl_idx)


def _symmetric_csr(ei, ej, ew, n):
    src = np.concatenate([ei, ej])
    dst = np.concatenate([ej, ei])
    w = np.concatenate([ew, ew])
    order = np.lexsort((dst, src))
    ptr = np.zeros(n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(np.bincount(src, minlength=n))
    return ptr, dst[order].astype(np.int64), w[order].astype(np.float64)


def _check_index(value, bound, what):
    if not 0 <= value < bound:
        raise ValueError(f"{what} {value} out of range [0, {bound})")


# -- problem and solver state ----------------------------------------------

@dataclass
class ProblemInstance:
    kernel: "KernelMatrix"  # noqa: F821 - defined in dcadmm.kernel
    n_labels: int
    loss: LossKind
    energies: list = field(default_factory=list)
    nu: float = 0.05

    def __post_init__(self):
        self.loss = LossKind.parse(self.loss)
        # nu = 0 is admitted as a degenerate, purely separable case
        if not self.nu >= 0:
            raise ValueError("regularization weight nu must be nonnegative")
        if self.n_labels < 1:
            raise ValueError("need at least one label")
        self.energies = list(self.energies)
        self.compiled = compile_energies(self.energies, self.n_vertices, self.n_labels)

    @property
    def n_vertices(self) -> int:
        return self.kernel.n


@dataclass
class SolverConfig:
    rho0: float = 1e-3
    tau: float = 1.003
    rho_max_override: Optional[float] = None
    delta: float = 1e-4
    gamma: float = 0.1
    max_iter: int = 20000
    primal_tol: float = 1e-7
    step_tol: float = 1e-7
    cg_tol: float = 1e-10
    cg_max_iter: int = 2000
    mrf_solver: MrfSolver = MrfSolver.ICM
    seed: int = 0
    threads: Optional[int] = None
    stable_iters: int = 5

    def __post_init__(self):
        self.mrf_solver = MrfSolver.parse(self.mrf_solver)
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if not self.tau > 1:
            raise ValueError("tau must exceed 1")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.rho_max_override is not None and not self.rho_max_override > 0:
            raise ValueError("rho_max_override must be positive")
        for name in ("primal_tol", "step_tol", "cg_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolverState:
    alpha: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    y: np.ndarray
    rho: float
    iteration: int = 0

    def copy(self) -> "SolverState":
        return SolverState(self.alpha.copy(), self.beta.copy(), self.lam.copy(),
                           self.y.copy(), self.rho, self.iteration)


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    rho: float
    lagrangian_value: float
    primal_residual: float
    alpha_step: float
    labels_changed: int
    descent_gate: Gate
    mrf_energy: float
    wall_time: float


def check_labeling(y, n_vertices: int, n_labels: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_vertices,):
        raise ValueError(f"labeling has shape {y.shape}, expected ({n_vertices},)")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_labels):
        raise ValueError(f"labels must lie in [0, {n_labels})")
    return y


# -- evaluation --------------------------------------------------------------

def eval_total_energy(instance_or_energies, y) -> float:
    """Sum of the clamp, Potts and balance-clique energies at ``y``."""
    comp = _compiled(instance_or_energies)
    y = check_labeling(y, comp.n_vertices, comp.n_labels)
    if not comp.allowed[np.arange(comp.n_vertices), y].all():
        return INF
    if comp.has_cliques:
        counts = comp.clique_counts(y)
        if (counts < comp.lower).any() or (counts > comp.upper).any():
            return INF
    if comp.edge_w.size == 0:
        return 0.0
    cut = y[comp.edge_i] != y[comp.edge_j]
    # exactly rounded, so the value does not depend on term order
    return math.fsum(comp.edge_w[cut])


def _compiled(obj) -> CompiledEnergies:
    if isinstance(obj, CompiledEnergies):
        return obj
    if isinstance(obj, ProblemInstance):
        return obj.compiled
    raise TypeError("expected a ProblemInstance or CompiledEnergies")


def eval_loss(loss, y_i: int, beta_i) -> float:
    """Loss of a single score row under label ``y_i``."""
    beta_i = np.asarray(beta_i, dtype=np.float64)
    return float(loss_rows(loss, np.array([y_i]), beta_i[None, :])[0])


def loss_rows(loss, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Row-wise loss values for labels ``y`` and scores ``beta``."""
    loss = LossKind.parse(loss)
    n, k = beta.shape
    rows = np.arange(n)
    if loss is LossKind.HINGE:
        sign = -np.ones((n, k))
        sign[rows, y] = 1.0
        return np.maximum(0.0, 1.0 - sign * beta).sum(axis=1)
    if loss is LossKind.CRAMMER_SINGER:
        margin = (beta + 1.0) - beta[rows, y][:, None]
        margin[rows, y] = 0.0
        return margin.max(axis=1)
    shift = beta.max(axis=1)
    lse = shift + np.log(np.exp(beta - shift[:, None]).sum(axis=1))
    return lse - beta[rows, y]


def eval_regularizer(instance: ProblemInstance, alpha: np.ndarray) -> float:
    """``nu * trace(alpha^T K alpha)``."""
    k_alpha = instance.kernel.matvec(alpha)
    return float(instance.nu * np.sum(alpha * k_alpha))


def eval_augmented_lagrangian(instance: ProblemInstance, state: SolverState,
                              rho: Optional[float] = None) -> float:
    rho = state.rho if rho is None else rho
    energy = eval_total_energy(instance, state.y)
    if energy == INF:
        return INF
    k_alpha = instance.kernel.matvec(state.alpha)
    resid = k_alpha - state.beta
    value = loss_rows(instance.loss, state.y, state.beta).sum()
    value += instance.nu * np.sum(state.alpha * k_alpha)
    value += energy
    value += np.sum(state.lam * resid) + 0.5 * rho * np.sum(resid * resid)
    return float(value)
