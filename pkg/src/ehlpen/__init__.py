"""Penalized DG-FVM solver for elastohydrodynamic point contacts."""

from .assembly import PenaltyConfig, ReynoldsAssembler, assemble_jacobian, assemble_residual
from .deformation import KernelMatrix, SingularRule, build_kernel
from .lubricant import LubricantLaw, OperatingCase, case_from_moes
from .mesh import InvalidConfiguration, RectDualMesh, build_mesh
from .solver import SolveResult, SolverConfig, SolverState, solve_case, solve_multilevel
from .verify import convergence_study, norms, rate_fit

__version__ = "0.1.0"

__all__ = [
    "InvalidConfiguration",
    "KernelMatrix",
    "LubricantLaw",
    "OperatingCase",
    "PenaltyConfig",
    "RectDualMesh",
    "ReynoldsAssembler",
    "SingularRule",
    "SolveResult",
    "SolverConfig",
    "SolverState",
    "assemble_jacobian",
    "assemble_residual",
    "build_kernel",
    "build_mesh",
    "case_from_moes",
    "convergence_study",
    "norms",
    "rate_fit",
    "solve_case",
    "solve_multilevel",
]
