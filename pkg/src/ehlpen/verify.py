"""Discrete norms, interpolation and convergence-rate studies.

Errors of EHL solutions are measured against a fine-grid reference: every
coarse solution is prolonged exactly (bilinear interpolation is nested) onto
the reference mesh and the norms are evaluated there.  Manufactured problems
are compared with the exact solution at Gauss points.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import LinearFVEProblem, PenaltyConfig, gamma_jump_operator, penalty_term
from .deformation import build_kernel
from .lubricant import OperatingCase
from .mesh import RectDualMesh, build_mesh, shape_gradients, shape_values
from .solver import SolverConfig, linear_solve, prolong, solve_case

__all__ = [
    "NormReport",
    "RateFit",
    "StudyFailed",
    "ManufacturedProblem",
    "EHLStudy",
    "ERROR_TRANSFERS",
    "norms",
    "error_norms",
    "interpolate",
    "fit_slope",
    "rate_fit",
    "reference_rate_fit",
    "convergence_study",
    "complementarity_report",
    "poisson_manufactured",
]

log = logging.getLogger(__name__)


class StudyFailed(RuntimeError):
    """A solve inside a convergence study did not converge."""

    def __init__(self, message, mesh_shape=None, result=None):
        super().__init__(message)
        self.mesh_shape = mesh_shape
        self.result = result


@dataclass(frozen=True)
class NormReport:
    l2: float
    broken_h1: float
    edge_sum: float
    mesh_h: float

    @property
    def triple(self) -> float:
        return math.sqrt(self.broken_h1**2 + self.edge_sum)

    def scaled(self, alpha: float) -> "NormReport":
        a = abs(alpha)
        return NormReport(a * self.l2, a * self.broken_h1, a * a * self.edge_sum, self.mesh_h)


def _cell_gauss(mesh: RectDualMesh, m: int):
    g, w = np.polynomial.legendre.leggauss(m)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    s, t = np.meshgrid(g, g, indexing="ij")
    wt = np.outer(w, w).ravel() * mesh.hx * mesh.hy
    return s.ravel(), t.ravel(), wt


def norms(v, mesh: RectDualMesh, m: int = 3) -> NormReport:
    """L2 norm, broken H1 seminorm and edge term of a nodal field.

    The edge term is ``sum_e |[gamma v]_e|^2``, with the one-sided trace on
    boundary edges.
    """
    v = mesh.check_field(v)
    s, t, wt = _cell_gauss(mesh, m)
    cv = mesh.cell_values(v)
    N = shape_values(s, t)
    dN = shape_gradients(s, t, mesh.hx, mesh.hy)
    vals = cv @ N.T
    grads = np.einsum("qcd,ec->eqd", dN, cv)
    l2 = math.sqrt(float(np.sum(vals**2 @ wt)))
    h1 = math.sqrt(float(np.sum(np.sum(grads**2, axis=-1) @ wt)))
    jumps = gamma_jump_operator(mesh) @ v
    edge = float(jumps @ jumps)
    return NormReport(l2=l2, broken_h1=h1, edge_sum=edge, mesh_h=mesh.h)


def error_norms(exact, grad_exact, u_h, mesh: RectDualMesh, m: int = 4) -> NormReport:
    """Norms of ``u - u_h`` for a smooth exact solution, by cell Gauss quadrature.

    Both ``u`` and ``u_h`` are continuous and vanish on the boundary, so the
    edge term of the error is zero.
    """
    u_h = mesh.check_field(u_h)
    s, t, wt = _cell_gauss(mesh, m)
    x0 = mesh.cell_origins
    px = x0[:, 0, None] + s[None] * mesh.hx
    py = x0[:, 1, None] + t[None] * mesh.hy
    cv = mesh.cell_values(u_h)
    uh = cv @ shape_values(s, t).T
    guh = np.einsum("qcd,ec->eqd", shape_gradients(s, t, mesh.hx, mesh.hy), cv)
    gx, gy = grad_exact(px, py)
    e0 = exact(px, py) - uh
    e1 = (gx - guh[..., 0]) ** 2 + (gy - guh[..., 1]) ** 2
    return NormReport(
        l2=math.sqrt(float(np.sum(e0**2 @ wt))),
        broken_h1=math.sqrt(float(np.sum(e1 @ wt))),
        edge_sum=0.0,
        mesh_h=mesh.h,
    )


def interpolate(func, mesh: RectDualMesh, dirichlet: bool = False) -> np.ndarray:
    """Vertex-value interpolant of ``func(x, y)``."""
    x, y = mesh.vertices.T
    v = np.asarray(func(x, y), dtype=float) * np.ones_like(x)
    return mesh.apply_dirichlet(v) if dirichlet else v


def fit_slope(hs, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(hs) < 2:
        raise ValueError("need at least two points to fit a slope")
    if np.any(errors <= 0) or np.any(hs <= 0):
        raise ValueError("errors and mesh sizes must be positive to fit a log-log slope")
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


@dataclass
class RateFit:
    mesh_hs: np.ndarray
    errors: dict
    slope: dict = field(default_factory=dict)
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.mesh_hs = np.asarray(self.mesh_hs, dtype=float)
        if len(self.mesh_hs) < 3:
            raise ValueError("need ≥ 3 meshes")
        if np.any(np.diff(self.mesh_hs) >= 0):
            raise ValueError("mesh sizes must be strictly decreasing")
        self.errors = {k: np.asarray(v, dtype=float) for k, v in self.errors.items()}
        if not self.slope:
            self.slope = {k: fit_slope(self.mesh_hs, v) for k, v in self.errors.items()}

    def running_slopes(self, key: str) -> np.ndarray:
        e = self.errors[key]
        out = np.full(len(e), np.nan)
        out[1:] = np.log(e[1:] / e[:-1]) / np.log(self.mesh_hs[1:] / self.mesh_hs[:-1])
        return out

    def to_csv(self) -> str:
        """Rate table ``h, err_L2, err_H1, slope_running`` with fitted slopes in a footer.

        ``slope_running`` is the running slope of the energy (H1-type) error.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "err_L2", "err_H1", "slope_running"])
        run = self.running_slopes("H1")
        for k, h in enumerate(self.mesh_hs):
            w.writerow([repr(float(h)), repr(float(self.errors["L2"][k])),
                        repr(float(self.errors["H1"][k])), "" if np.isnan(run[k]) else repr(float(run[k]))])
        buf.write("# slope_L2=%.6f slope_H1=%.6f\n" % (self.slope["L2"], self.slope["H1"]))
        return buf.getvalue()


def rate_fit(hs, l2_errors, h1_errors, labels=None) -> RateFit:
    return RateFit(mesh_hs=hs, errors={"L2": l2_errors, "H1": h1_errors}, labels=list(labels or []))


@dataclass(frozen=True)
class ManufacturedProblem:
    """``-div(c grad u) = f`` with a known smooth solution vanishing on the boundary."""

    exact: object
    grad: object
    source: object
    domain_bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    coefficient: float = 1.0

    def solve(self, mesh: RectDualMesh) -> np.ndarray:
        prob = LinearFVEProblem(mesh, self.source, self.coefficient)
        u0 = mesh.zero_field()
        system = prob.jacobian(u0)
        return u0 + linear_solve(system, -system.residual)


def poisson_manufactured() -> ManufacturedProblem:
    """``u = x(1-x) y(1-y)`` on the unit square, ``f = 2(x(1-x) + y(1-y))``."""
    return ManufacturedProblem(
        exact=lambda x, y: x * (1 - x) * y * (1 - y),
        grad=lambda x, y: ((1 - 2 * x) * y * (1 - y), x * (1 - x) * (1 - 2 * y)),
        source=lambda x, y: 2.0 * (x * (1 - x) + y * (1 - y)),
    )


ERROR_TRANSFERS = ("restrict", "prolong")


@dataclass(frozen=True)
class EHLStudy:
    """EHL rate study against a fine-grid reference solution."""

    case: OperatingCase
    reference_n: int = 256
    solver_config: SolverConfig = field(default_factory=SolverConfig)
    pen: PenaltyConfig = field(default_factory=PenaltyConfig)
    transfer: str = "restrict"

    def __post_init__(self):
        if self.transfer not in ERROR_TRANSFERS:
            raise ValueError("transfer must be one of %s" % (ERROR_TRANSFERS,))


def _check_sequence(mesh_sequence):
    if len(mesh_sequence) < 3:
        raise ValueError("need ≥ 3 meshes")
    shapes = [tuple(s) if np.ndim(s) else (int(s), int(s)) for s in mesh_sequence]
    for a, b in zip(shapes, shapes[1:]):
        if not (b[0] > a[0] and b[1] > a[1]):
            raise ValueError("mesh sequence must refine strictly")
    return shapes


def convergence_study(problem, mesh_sequence, reference="exact", kernel_cache_dir=None):
    """Fit error slopes over a refining mesh sequence.

    ``problem`` is a :class:`ManufacturedProblem` (``reference="exact"``) or an
    :class:`EHLStudy` (``reference="fine-grid"``).  Returns ``(RateFit, details)``
    where ``details`` holds the per-mesh solutions/diagnostics.
    """
    shapes = _check_sequence(mesh_sequence)
    if isinstance(problem, ManufacturedProblem):
        if reference != "exact":
            raise ValueError("manufactured problems are compared with the exact solution")
        hs, e2, e1, sols = [], [], [], []
        for nx, ny in shapes:
            mesh = build_mesh(problem.domain_bounds, nx, ny)
            u_h = problem.solve(mesh)
            rep = error_norms(problem.exact, problem.grad, u_h, mesh)
            hs.append(mesh.h)
            e2.append(rep.l2)
            e1.append(rep.triple)
            sols.append((mesh, u_h))
            log.info("manufactured nx=%d ny=%d h=%.6g err_L2=%.6e err_H1=%.6e", nx, ny, mesh.h, rep.l2, rep.triple)
        return rate_fit(hs, e2, e1, labels=shapes), {"solutions": sols}
    if isinstance(problem, EHLStudy):
        if reference not in ("fine-grid", "fine"):
            raise ValueError("EHL studies need a fine-grid reference")
        return _ehl_study(problem, shapes, kernel_cache_dir)
    raise TypeError("unsupported problem type %r" % type(problem).__name__)


def _ehl_study(study: EHLStudy, shapes, cache_dir):
    case = study.case
    ref_shape = (study.reference_n, study.reference_n)
    finest = shapes[-1]
    if ref_shape[0] < 2 * finest[0] or ref_shape[1] < 2 * finest[1]:
        raise ValueError("reference mesh must be at least twice as fine as the finest study mesh")
    results = {}
    prev = None
    for shape in shapes + [ref_shape]:
        mesh = build_mesh(case.domain_bounds, *shape)
        kernel = build_kernel(mesh, cache_dir=cache_dir)
        initial = None if prev is None else (prolong(prev.u, prev.mesh, mesh), prev.h00)
        res = solve_case(case, mesh, study.solver_config, study.pen, kernel=kernel, initial=initial)
        if not res.converged:
            raise StudyFailed("solve on mesh %dx%d failed: %s" % (shape + (res.message,)), shape, res)
        log.info("ehl nx=%d ny=%d iters=%d max_u=%.6f h00=%.8f", shape[0], shape[1], res.state.iter,
                 float(res.u.max()), res.h00)
        results[shape] = res
        prev = res
    ref = results[ref_shape]
    fit = reference_rate_fit([results[s] for s in shapes], ref, study.transfer)
    return fit, {"results": results, "reference": ref}


def reference_rate_fit(results, reference, transfer: str = "restrict") -> RateFit:
    """Rate fit of solved meshes against a fine-grid reference solution.

    ``transfer="restrict"`` interpolates the reference down to each study
    mesh and measures there; ``"prolong"`` interpolates each solution up to
    the reference mesh instead.
    """
    if transfer not in ERROR_TRANSFERS:
        raise ValueError("transfer must be one of %s" % (ERROR_TRANSFERS,))
    hs, e2, e1 = [], [], []
    for res in results:
        if transfer == "restrict":
            diff = res.u - reference.mesh.evaluate(reference.u, res.mesh.vertices)
            rep = norms(res.mesh.apply_dirichlet(diff), res.mesh)
        else:
            rep = norms(prolong(res.u, res.mesh, reference.mesh) - reference.u, reference.mesh)
        hs.append(res.mesh.h)
        e2.append(rep.l2)
        e1.append(rep.triple)
    labels = [(r.mesh.nx, r.mesh.ny) for r in results]
    return rate_fit(hs, e2, e1, labels=labels)


def complementarity_report(state, mesh: RectDualMesh, eps_pen: float) -> dict:
    """Cavitation diagnostics of a pressure field.

    ``pairing`` is ``<xi(u), u>`` with the assembled penalty; it equals
    ``neg_norm**2 / eps`` exactly for the lumped penalty, and
    ``identity_gap`` is the relative mismatch of that identity.
    """
    u = mesh.check_field(getattr(state, "u", state))
    neg = np.minimum(u, 0.0)
    w = mesh.vertex_weights
    neg_norm = math.sqrt(float(w @ neg**2))
    pairing = float(penalty_term(u, mesh, eps_pen) @ u)
    max_violation = float(max(0.0, -u.min()))
    return {
        "neg_norm": neg_norm,
        "max_violation": max_violation,
        "pairing": pairing,
        "identity_gap": abs(pairing - neg_norm**2 / eps_pen) / max(abs(pairing), 1e-300),
        "violation_over_eps": max_violation / eps_pen,
    }
