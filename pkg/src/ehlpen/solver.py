"""Damped Newton iteration with force balance for the penalized EHL scheme.

The film offset ``h00`` is tied to the load condition ``int u = 2 pi / 3``.
Two couplings are available:

``coupled``
    ``(u, h00)`` are updated together; the bordered Newton system is reduced
    by a Schur complement so the linear solves only involve the Reynolds
    Jacobian.
``staggered``
    A Newton step on ``u`` at fixed ``h00`` followed by the relaxed update
    ``h00 <- h00 + gain * (int u - target)``; the sign of ``gain`` is checked
    with a probe step before the iteration starts.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla

from .assembly import DiscreteSystem, PenaltyConfig, ReynoldsAssembler
from .deformation import KernelMatrix, build_kernel
from .lubricant import DegenerateFilm, OperatingCase, with_moes
from .mesh import InvalidConfiguration, RectDualMesh, build_mesh

__all__ = [
    "FORCE_TARGET",
    "SolverBreakdown",
    "SolverConfig",
    "SolverState",
    "SolveResult",
    "hertz_guess",
    "force_integral",
    "linear_solve",
    "factorize",
    "newton_step",
    "update_h00",
    "solve_case",
    "solve_multilevel",
    "continuation_stages",
    "prolong",
]

log = logging.getLogger(__name__)

FORCE_TARGET = 2.0 * math.pi / 3.0
LINEAR_MODES = ("auto", "dense", "sparse", "krylov")
H00_MODES = ("coupled", "staggered")


class SolverBreakdown(RuntimeError):
    """Linear solve failed or damping underflowed; carries the last iterate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


CONTINUATION_KEYS = ("eps", "M", "L")


def _normalize_steps(steps):
    out = []
    for step in steps:
        if isinstance(step, (int, float)):
            key, value = "eps", float(step)
        else:
            key, value = step
            value = float(value)
        if key not in CONTINUATION_KEYS:
            raise InvalidConfiguration("continuation key must be one of %s, got %r" % (CONTINUATION_KEYS, key))
        if not value > 0 and not (key == "L" and value == 0):
            raise InvalidConfiguration("continuation value for %s must be positive, got %r" % (key, value))
        out.append((key, value))
    return tuple(out)


@dataclass(frozen=True)
class SolverConfig:
    """Newton iteration settings.

    ``continuation`` lists staged solves before the target case: ``("eps", v)``
    sets the penalty parameter, ``("M", v)`` / ``("L", v)`` the Moes
    parameters (bare numbers are penalty values).  ``l_ramp`` adds automatic
    steps ``L = 0, l_ramp, 2 l_ramp, ...`` when starting from the Hertz guess.
    Trial iterates are projected: nodes that were positive stop at ``u = 0``,
    nodes already cavitated stay above ``-(0.1 tol_neg + 10 eps)``.
    """

    max_iters: int = 80
    tol_res: float = 1.0e-8
    tol_force: float = 1.0e-9
    tol_neg: float = 1.0e-4
    damping: float = 0.5
    omega_min: float = 1.0 / 256.0
    growth_limit: float = 10.0
    h00_update: str = "coupled"
    h00_gain: float = 0.05
    truncation: str = "adjacent-only"
    linear: str = "auto"
    dense_limit: int = 1500
    krylov_tol: float = 1.0e-10
    continuation: tuple = ()
    l_ramp: float = 2.5
    force_target: float = FORCE_TARGET

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidConfiguration("max_iters must be >= 1")
        if not (self.tol_res > 0 and self.tol_force > 0 and self.tol_neg > 0):
            raise InvalidConfiguration("solver tolerances must be positive")
        if not (0 < self.damping <= 1):
            raise InvalidConfiguration("damping must lie in (0, 1]")
        if not (0 < self.omega_min <= self.damping):
            raise InvalidConfiguration("omega_min must lie in (0, damping]")
        if not self.growth_limit >= 1:
            raise InvalidConfiguration("growth_limit must be >= 1")
        if self.h00_update not in H00_MODES:
            raise InvalidConfiguration("h00_update must be one of %s" % (H00_MODES,))
        if self.linear not in LINEAR_MODES:
            raise InvalidConfiguration("linear must be one of %s" % (LINEAR_MODES,))
        if self.truncation not in ("none", "adjacent-only"):
            raise InvalidConfiguration("truncation must be 'none' or 'adjacent-only'")
        if not self.l_ramp >= 0:
            raise InvalidConfiguration("l_ramp must be >= 0")
        object.__setattr__(self, "continuation", _normalize_steps(self.continuation))


@dataclass
class SolverState:
    u: np.ndarray
    h00: float
    iter: int = 0
    residual: np.ndarray | None = None
    res_history: list = field(default_factory=list)
    force_gap: float = float("nan")
    flags: dict = field(default_factory=lambda: {"viscosity_capped": 0, "degenerate_film": 0})
    omega: float = 1.0
    log_lines: list = field(default_factory=list)

    def copy(self) -> "SolverState":
        return replace(
            self,
            u=self.u.copy(),
            residual=None if self.residual is None else self.residual.copy(),
            res_history=list(self.res_history),
            flags=dict(self.flags),
            log_lines=list(self.log_lines),
        )


@dataclass
class SolveResult:
    state: SolverState
    mesh: RectDualMesh
    film: np.ndarray
    converged: bool
    message: str = ""

    @property
    def u(self):
        return self.state.u

    @property
    def h00(self):
        return self.state.h00

    def summary(self) -> dict:
        s = self.state
        return {
            "converged": bool(self.converged),
            "max_u": float(np.max(s.u)),
            "min_u": float(np.min(s.u)),
            "h00": float(s.h00),
            "force_gap": float(s.force_gap),
            "iters": int(s.iter),
            "res_norm": float(s.res_history[-1][0]) if s.res_history else float("nan"),
            "min_film": float(np.min(self.film)),
        }


def hertz_guess(mesh: RectDualMesh) -> np.ndarray:
    """Nodal Hertzian hemisphere ``max(0, sqrt(1 - r^2))`` with zero boundary."""
    x, y = mesh.vertices.T
    u = np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
    return mesh.apply_dirichlet(u)


def force_integral(u, mesh: RectDualMesh) -> float:
    """Exact integral of the bilinear field, ``sum_a w_a u_a``."""
    return float(mesh.vertex_weights @ mesh.check_field(u))


def prolong(v, coarse: RectDualMesh, fine: RectDualMesh) -> np.ndarray:
    """Bilinear interpolation of a coarse nodal field onto a finer mesh."""
    if tuple(coarse.domain_bounds) != tuple(fine.domain_bounds):
        raise ValueError("prolongation needs meshes on the same domain")
    return fine.apply_dirichlet(coarse.evaluate(v, fine.vertices))


# -- linear algebra ------------------------------------------------------------
def _as_free_problem(system):
    """Split a system into (matrix-like, free index array or None)."""
    if isinstance(system, DiscreteSystem):
        return system, system.free
    if sparse.issparse(system) or isinstance(system, np.ndarray) or isinstance(system, spla.LinearOperator):
        return system, None
    raise TypeError("unsupported system type %r" % type(system).__name__)


def _choose_mode(system: DiscreteSystem, mode: str, dense_limit: int) -> str:
    if mode != "auto":
        return mode
    return "dense" if len(system.free) <= dense_limit else "krylov"


def factorize(system, mode: str = "auto", dense_limit: int = 1500, krylov_tol: float = 1e-10):
    """Return ``solve(rhs)`` for the Jacobian of ``system``.

    ``dense`` factorizes the untruncated Jacobian; ``sparse`` factorizes the
    truncated one (an approximate Newton step); ``krylov`` runs GMRES on the
    untruncated operator, preconditioned by the truncated factorization.
    """
    A, free = _as_free_problem(system)
    if free is None:
        return _plain_factorization(A)
    mode = _choose_mode(A, mode, dense_limit)
    f = free
    n = A.size
    fixed = np.ones(n, dtype=bool)
    fixed[f] = False

    def embed(solve_free):  # Dirichlet rows are identities
        def solve(rhs):
            rhs = np.asarray(rhs, dtype=float)
            out = rhs.copy()
            out[f] = solve_free(rhs[f])
            out[fixed] = rhs[fixed]
            return out

        return solve

    if not A.has_film_coupling:
        mode = "dense" if mode == "dense" else "sparse"
    if mode == "dense":
        Jff = A.jac_sparse[f][:, f].toarray()
        if A.has_film_coupling:
            Jff += _dense_block(A)[np.ix_(f, f)]
        lu = _checked_lu(Jff)
        return embed(lambda b: scipy.linalg.lu_solve(lu, b))
    trunc = A.jac_sparse
    if A.has_film_coupling:
        trunc = trunc + A.coupling @ A.kernel.truncated()
    trunc = trunc.tocsr()[f][:, f].tocsc()
    try:
        slu = spla.splu(trunc, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SolverBreakdown("sparse factorization failed: %s" % exc) from exc
    if mode == "sparse":
        return embed(_finite(slu.solve))

    def exact_free(v):
        full = np.zeros(n)
        full[f] = v
        return A.matvec(full, exact=True)[f]

    op = spla.LinearOperator((len(f), len(f)), matvec=exact_free, dtype=float)
    pre = spla.LinearOperator((len(f), len(f)), matvec=slu.solve, dtype=float)

    def krylov(b):
        if not np.any(b):
            return np.zeros_like(b)
        x, info = spla.gmres(op, b, x0=slu.solve(b), M=pre, rtol=krylov_tol, atol=0.0,
                             restart=60, maxiter=20)
        if info != 0:
            raise SolverBreakdown("GMRES did not reach rtol=%g (info=%d)" % (krylov_tol, info))
        return x

    return embed(krylov)


def _dense_block(system: DiscreteSystem):
    # film coupling with the full kernel regardless of the truncation policy
    return np.asarray(system.coupling @ system.kernel.entries)


def _checked_lu(M):
    if not np.all(np.isfinite(M)):
        raise SolverBreakdown("non-finite Jacobian entries")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    d = np.abs(np.diag(lu))
    # penalty rows are ~1/eps larger than flux rows, so only exact or
    # round-off level pivots count as singular
    if d.max() == 0.0 or d.min() <= 1e-20 * d.max():
        ratio = d.min() / d.max() if d.max() > 0 else 0.0
        raise SolverBreakdown("singular Jacobian (pivot ratio %.2e)" % ratio)
    return lu, piv


def _finite(solve):
    def wrapped(b):
        x = solve(np.asarray(b, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SolverBreakdown("linear solve produced non-finite values")
        return x

    return wrapped


def _plain_factorization(A):
    if isinstance(A, spla.LinearOperator):
        def solve(b):
            x, info = spla.gmres(A, b, rtol=1e-12, atol=0.0)
            if info != 0:
                raise SolverBreakdown("GMRES breakdown (info=%d)" % info)
            return x

        return solve
    if sparse.issparse(A):
        try:
            slu = spla.splu(sparse.csc_matrix(A, dtype=float))
        except RuntimeError as exc:
            raise SolverBreakdown("singular matrix: %s" % exc) from exc
        return _finite(slu.solve)
    M = np.atleast_2d(np.asarray(A, dtype=float))
    lu = _checked_lu(M)
    return lambda b: scipy.linalg.lu_solve(lu, np.asarray(b, dtype=float))


def linear_solve(system, rhs, mode: str = "auto", **kw) -> np.ndarray:
    """Solve ``J x = rhs`` for a :class:`DiscreteSystem`, array or sparse matrix."""
    return factorize(system, mode, **kw)(rhs)


# -- iteration pieces ----------------------------------------------------------
def newton_step(state: SolverState, system, omega: float, residual_fn, **solve_kw) -> SolverState:
    """One damped Newton update ``u <- u - omega J^{-1} R`` at fixed ``h00``.

    ``residual_fn(u, h00)`` recomputes the residual at the new iterate; the
    residual at the current iterate is taken from ``system`` when available,
    otherwise from ``state.residual``.
    """
    if not (0.0 <= omega <= 1.0):
        raise ValueError("omega must lie in [0, 1]")
    R = getattr(system, "residual", None)
    if R is None:
        R = state.residual if state.residual is not None else residual_fn(state.u, state.h00)
    new = state.copy()
    new.iter += 1
    if omega == 0.0:
        new.residual = np.asarray(R, dtype=float).copy()
        return new
    delta = linear_solve(system, -np.asarray(R, dtype=float), **solve_kw)
    new.u = state.u + omega * delta
    new.residual = np.asarray(residual_fn(new.u, new.h00), dtype=float)
    new.res_history.append((float(np.max(np.abs(new.residual))),
                            float(np.linalg.norm(new.residual))))
    return new


def update_h00(state: SolverState, mesh: RectDualMesh, target_integral: float, gain: float) -> SolverState:
    """Relaxed force balance ``h00 <- h00 + gain * (int u - target)``.

    A positive gain raises the offset when the load is overshot, which thins
    the pressure.
    """
    new = state.copy()
    gap = force_integral(state.u, mesh) - target_integral
    new.h00 = state.h00 + gain * gap
    new.force_gap = gap
    return new


# -- full solve ----------------------------------------------------------------
class _Problem:
    """Residual evaluations with film-degeneracy tracking."""

    def __init__(self, asm: ReynoldsAssembler, config: SolverConfig):
        self.asm = asm
        self.mesh = asm.mesh
        self.config = config

    def residual(self, u, h00):
        return self.asm.residual(u, h00)

    def merit(self, u, h00):
        """(scaled max residual, scaled l2 residual, force gap); None if degenerate."""
        try:
            R = self.asm.residual(u, h00)
        except DegenerateFilm:
            return None, None
        S = self.asm.scaled_residual(R)
        gap = force_integral(u, self.mesh) - self.config.force_target
        return R, (float(np.max(np.abs(S))), float(np.sqrt(np.mean(S * S))), gap)


def _merit_value(m):
    return math.hypot(m[1], m[2])


def _log_line(state, metrics, omega):
    return ("iter=%d res_norm=%.6e res_l2=%.6e force_gap=%.6e h00=%.12e min_u=%.6e max_u=%.6e omega=%.6g"
            % (state.iter, metrics[0], metrics[1], metrics[2], state.h00,
               float(np.min(state.u)), float(np.max(state.u)), omega))


def _probe_gain_sign(problem, state, gain, config):
    """Sign of the staggered gain: ``d(int u)/d h00`` must be negative."""
    sysm = problem.asm.jacobian(state.u, state.h00, config.truncation)
    solve = factorize(sysm, config.linear, config.dense_limit, config.krylov_tol)
    du = solve(-sysm.dres_dh00)
    dF = force_integral(du, problem.mesh)
    return abs(gain) if dF < 0 else -abs(gain)


def continuation_stages(case: OperatingCase, pen: PenaltyConfig, config: SolverConfig, from_hertz: bool):
    """``(case, eps)`` stages ending with the target case and penalty."""
    stages = []
    if from_hertz and config.l_ramp > 0 and case.L > config.l_ramp:
        for L in np.arange(0.0, case.L, config.l_ramp):
            if case.L - L > 1e-12:
                stages.append((with_moes(case, L=float(L)), pen.eps_pen))
    cur_case, cur_eps = case, pen.eps_pen
    user = []
    for key, value in config.continuation:
        if key == "eps":
            cur_eps = value
        elif key == "M":
            cur_case = with_moes(case, M=value)
        else:
            cur_case = with_moes(case, L=value)
        user.append((cur_case, cur_eps))
    stages.extend(user)
    stages.append((case, pen.eps_pen))
    return stages


def solve_case(case: OperatingCase, mesh: RectDualMesh, solver_config: SolverConfig | None = None,
               pen: PenaltyConfig | None = None, kernel: KernelMatrix | None = None,
               initial=None) -> SolveResult:
    """Solve the penalized EHL system with force balance on ``mesh``.

    ``initial`` is an optional ``(u, h00)`` pair; by default the Hertzian
    hemisphere and ``case.h00_init`` are used and the material parameter is
    ramped up (see :class:`SolverConfig`).  The result carries
    ``converged=False`` and the full history when the tolerances are not met.
    """
    config = solver_config if solver_config is not None else SolverConfig()
    pen = pen if pen is not None else PenaltyConfig()
    if kernel is None:
        kernel = build_kernel(mesh)
    from_hertz = initial is None
    if from_hertz:
        u0, h0 = hertz_guess(mesh), case.h00_init
    else:
        u0, h0 = mesh.apply_dirichlet(np.asarray(initial[0], dtype=float)), float(initial[1])
    state = SolverState(u=u0, h00=float(h0))
    stages = continuation_stages(case, pen, config, from_hertz)
    result = None
    for k, (stage_case, eps) in enumerate(stages):
        asm = ReynoldsAssembler(mesh, kernel, stage_case, replace(pen, eps_pen=eps))
        label = "M=%g L=%g eps=%g" % (stage_case.M, stage_case.L, eps)
        result = _solve_stage(_Problem(asm, config), state, config, label, final=k == len(stages) - 1)
        state = result.state
        if not result.converged:
            if k < len(stages) - 1:
                result.message = "continuation stage %s: %s" % (label, result.message)
            return result
    return result


def _project(u_old, trial, floor):
    """Keep newly cavitating nodes on the kink; active ones stay above ``floor``."""
    return np.where(u_old > 0, np.maximum(trial, 0.0), np.maximum(trial, floor))


def _solve_stage(problem: _Problem, state: SolverState, config: SolverConfig, label: str,
                 final: bool = True) -> SolveResult:
    asm = problem.asm
    mesh = problem.mesh
    eps = asm.pen.eps_pen
    floor = -(0.1 * config.tol_neg + 10.0 * eps)
    state = state.copy()
    R, metrics = problem.merit(state.u, state.h00)
    if R is None:
        return _result(problem, state, False, "degenerate film at the initial iterate", final)
    state.residual = R
    state.force_gap = metrics[2]
    omega = config.damping
    gain = None
    if config.h00_update == "staggered":
        try:
            gain = _probe_gain_sign(problem, state, config.h00_gain, config)
        except (SolverBreakdown, DegenerateFilm) as exc:
            return _result(problem, state, False, "gain probe failed: %s" % exc, final)
    start_iter = state.iter
    recent = [_merit_value(metrics)]
    while True:
        line = "stage=%s %s" % (label.replace(" ", ","), _log_line(state, metrics, omega))
        state.log_lines.append(line)
        log.info(line)
        if metrics[0] <= config.tol_res and abs(metrics[2]) <= config.tol_force:
            return _result(problem, state, True, "converged", final)
        if state.iter - start_iter >= config.max_iters:
            return _result(problem, state, False, "max_iters=%d reached" % config.max_iters, final)
        try:
            system = asm.jacobian(state.u, state.h00, config.truncation)
            solve = factorize(system, config.linear, config.dense_limit, config.krylov_tol)
            d1 = solve(-state.residual)
            if config.h00_update == "coupled":
                d2 = solve(-system.dres_dh00)
                w = mesh.vertex_weights
                denom = float(w @ d2)
                if denom == 0.0 or not math.isfinite(denom):
                    raise SolverBreakdown("force balance insensitive to h00")
                dh = (-metrics[2] - float(w @ d1)) / denom
                du = d1 + dh * d2
            else:
                du, dh = d1, 0.0
        except (SolverBreakdown, DegenerateFilm) as exc:
            return _result(problem, state, False, "breakdown: %s" % exc, final)
        # non-monotone acceptance: penalty rows jump when the active set moves
        bound = config.growth_limit * max(recent[-5:])
        while True:
            trial_u = _project(state.u, state.u + omega * du, floor)
            trial_h = state.h00 + omega * dh
            if gain is not None:
                trial_h += gain * (force_integral(trial_u, mesh) - config.force_target)
            R_new, m_new = problem.merit(trial_u, trial_h)
            if R_new is None:
                state.flags["degenerate_film"] += 1
            elif math.isfinite(_merit_value(m_new)) and _merit_value(m_new) <= bound:
                break
            omega *= 0.5
            if omega < config.omega_min:
                return _result(problem, state, False,
                               "damping underflow (omega < %g) at iter %d" % (config.omega_min, state.iter), final)
        state.u, state.h00 = trial_u, trial_h
        state.residual, metrics = R_new, m_new
        state.force_gap = m_new[2]
        state.iter += 1
        state.omega = omega
        state.res_history.append((m_new[0], m_new[1]))
        state.flags["viscosity_capped"] = asm.events["viscosity_capped"]
        recent.append(_merit_value(m_new))
        omega = min(1.0, 2.0 * omega)


def _result(problem, state, converged, message, final=True):
    film = problem.asm.film(state.u, state.h00)
    if converged and final:
        neg = -float(np.min(state.u))
        if neg > problem.config.tol_neg:
            converged = False
            message = "negative pressure %.3e exceeds tol_neg" % neg
    return SolveResult(state=state, mesh=problem.mesh, film=film, converged=converged, message=message)


def solve_multilevel(case: OperatingCase, nx: int, ny: int, solver_config: SolverConfig | None = None,
                     pen: PenaltyConfig | None = None, coarsest: int = 16, kernels=None,
                     return_levels: bool = False):
    """Grid continuation: solve on halved meshes first and prolong upward.

    Levels are ``(nx, ny) / 2^k`` down to ``coarsest`` cells in the smaller
    direction; each solution seeds the next level.
    """
    levels = [(nx, ny)]
    while min(levels[-1]) // 2 >= coarsest and all(n % 2 == 0 for n in levels[-1]):
        levels.append((levels[-1][0] // 2, levels[-1][1] // 2))
    levels.reverse()
    kernels = kernels if kernels is not None else {}
    initial = None
    prev_mesh = None
    results = []
    for lx, ly in levels:
        mesh = build_mesh(case.domain_bounds, lx, ly)
        kernel = kernels.get((lx, ly)) or build_kernel(mesh)
        if prev_mesh is not None:
            initial = (prolong(results[-1].u, prev_mesh, mesh), results[-1].h00)
        res = solve_case(case, mesh, solver_config, pen, kernel=kernel, initial=initial)
        results.append(res)
        if not res.converged:
            res.message = "level %dx%d: %s" % (lx, ly, res.message)
            break
        prev_mesh = mesh
    return results if return_levels else results[-1]
