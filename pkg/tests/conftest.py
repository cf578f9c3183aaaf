import pytest

from ehlpen.deformation import build_kernel
from ehlpen.lubricant import case_from_moes
from ehlpen.mesh import build_mesh
from ehlpen.solver import SolverConfig, solve_multilevel

_SOLUTIONS = {}


def solved(M, L=10.0, n=32):
    """Converged solution on an n x n mesh, cached for the whole session."""
    key = (M, L, n)
    if key not in _SOLUTIONS:
        _SOLUTIONS[key] = solve_multilevel(case_from_moes(M, L), n, n, SolverConfig())
    return _SOLUTIONS[key]


@pytest.fixture(scope="session")
def m7_32():
    return solved(7.0, 10.0, 32)


@pytest.fixture(scope="session")
def mesh32_kernel():
    case = case_from_moes(7, 10)
    mesh = build_mesh(case.domain_bounds, 32, 32)
    return case, mesh, build_kernel(mesh)


_STUDY = {}


def ehl_study():
    """M=7, L=10 study on 16..128 against a 256 x 256 reference (solved once)."""
    if "fit" not in _STUDY:
        from ehlpen.verify import EHLStudy, convergence_study

        study = EHLStudy(case_from_moes(7, 10), reference_n=256)
        _STUDY["fit"], _STUDY["details"] = convergence_study(
            study, [16, 32, 64, 128], reference="fine-grid"
        )
    return _STUDY["fit"], _STUDY["details"]
