"""Discrete-continuous ADMM for joint MRF labeling and kernel classifier training."""

from ._backend import NAME as backend_name
from .admm import RunReport, compute_rho_threshold, run
from .baselines import constrained_kernel_kmeans, coordinate_descent
from .core import (BalanceClique, Gate, IterationTrace, LossKind, MrfSolver, NumericFailure,
                   PairwisePotts, ProblemInstance, SolverConfig, SolverState, Termination,
                   UnaryClamp, eval_augmented_lagrangian, eval_total_energy)
from .kernel import (KernelMatrix, KernelNotSurjective, LinearSpec, PrecomputedSpec, RBFSpec,
                     build_kernel, nystrom_factor, spectral_bounds)
from .mrf import InfeasibleError, MrfInstance, solve_mrf
from .prox import build_lookup_table, prox_oracle, prox_step

__version__ = "0.1.0"

__all__ = [
    "BalanceClique", "Gate", "InfeasibleError", "IterationTrace", "KernelMatrix",
    "KernelNotSurjective", "LinearSpec", "LossKind", "MrfInstance", "MrfSolver",
    "NumericFailure", "PairwisePotts", "PrecomputedSpec", "ProblemInstance", "RBFSpec",
    "RunReport", "SolverConfig", "SolverState", "Termination", "UnaryClamp", "backend_name",
    "build_kernel", "build_lookup_table", "compute_rho_threshold", "constrained_kernel_kmeans",
    "coordinate_descent", "eval_augmented_lagrangian", "eval_total_energy", "nystrom_factor",
    "prox_oracle", "prox_step", "run", "solve_mrf", "spectral_bounds",
]
