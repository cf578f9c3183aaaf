"""Residual and Jacobian of the penalized finite-volume Reynolds scheme.

Trial functions are continuous bilinears with vertex coefficients; the test
function attached to vertex ``a`` is ``gamma phi_a`` (equal to 1/2 on every
dual triangle whose base side touches ``a``).  Integrating the Reynolds
operator ``-div(eps grad u) + d(rho h)/dx`` over each dual triangle leaves
fluxes through the two inner sides ``C A_j``; the base-side parts combine into
edge jump/average terms that are assembled through the jump operators.

All residual entries are area-weighted (units of the equation times area);
``scaled_residual`` divides by the vertex weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .deformation import KernelMatrix, rigid_gap
from .lubricant import (
    DegenerateFilm,
    LubricantLaw,
    OperatingCase,
    density,
    density_du,
    epsilon_star_partials,
    viscosity,
)
from .mesh import REF_CENTER, REF_CORNERS, RectDualMesh, shape_gradients, shape_values

__all__ = [
    "DiscreteSystem",
    "LinearFVEProblem",
    "PenaltyConfig",
    "ReynoldsAssembler",
    "assemble_fve_laplacian",
    "assemble_fve_load",
    "assemble_jacobian",
    "assemble_residual",
    "gamma_jump_operator",
    "interior_penalty_term",
    "penalty_term",
    "penalty_derivative",
    "TRUNCATION_POLICIES",
    "CONVECTION_SCHEMES",
    "wedge_dissipation",
]

TRUNCATION_POLICIES = ("none", "adjacent-only")

# vertex offset kept by the adjacent-only truncation: evaluation vertex k sits
# in the 4 cells around it; cells sharing a vertex with those reach |dk| <= 2
ADJACENT_RADIUS = 2


CONVECTION_SCHEMES = ("centered", "upwind2")


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty and stabilization settings.

    ``convection="upwind2"`` adds the third-difference correction that turns
    the centered wedge term into a second-order upstream one; ``"centered"``
    keeps the plain dual-edge evaluation.
    """

    eps_pen: float = 1.0e-6
    alpha1: float | None = None
    beta_vec: tuple[float, float] = (1.0, 0.0)
    convection: str = "upwind2"

    def __post_init__(self):
        if not self.eps_pen > 0:
            raise ValueError("exterior penalty parameter must be positive")
        if self.alpha1 is not None and not self.alpha1 > 0:
            raise ValueError("interior penalty weight must be positive")
        if self.convection not in CONVECTION_SCHEMES:
            raise ValueError("convection must be one of %s" % (CONVECTION_SCHEMES,))
        if self.convection == "upwind2" and (self.beta_vec[1] != 0 or self.beta_vec[0] == 0):
            raise ValueError("upwind2 convection needs an x-aligned rolling direction")


def wedge_dissipation(mesh: RectDualMesh, beta_x: float = 1.0) -> sparse.csr_matrix:
    """Third-difference operator ``D`` with ``centered + D f = upstream`` for the wedge term.

    Row ``a`` holds ``w_a |beta_x| / (2 hx) * (-f[i+1] + 3 f[i] - 3 f[i-1] + f[i-2])`` along
    the rolling direction; rows without two upstream neighbours stay empty.
    """
    nx1 = mesh.nx + 1
    idx = np.arange(mesh.num_vertices)
    i = idx % nx1
    step = 1 if beta_x > 0 else -1
    if step > 0:
        ok = (i >= 2) & (i <= mesh.nx - 1)
    else:
        ok = (i <= mesh.nx - 2) & (i >= 1)
    ok &= ~mesh.dirichlet_mask
    rows = idx[ok]
    scale = mesh.vertex_weights[rows] * abs(beta_x) / (2.0 * mesh.hx)
    rr, cc, vv = [], [], []
    for off, c in ((1, -1.0), (0, 3.0), (-1, -3.0), (-2, 1.0)):
        rr.append(rows)
        cc.append(rows + step * off)
        vv.append(c * scale)
    n = mesh.num_vertices
    return sparse.csr_matrix(
        (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(n, n)
    )


class _SegmentQuadrature:
    """Reference data for the inner sides ``C -> A_j`` of one rectangle."""

    def __init__(self, hx, hy, npts=2):
        g, w = np.polynomial.legendre.leggauss(npts)
        g = 0.5 * (g + 1.0)
        w = 0.5 * w
        scale = np.array([hx, hy])
        tri_centroids = np.array(
            [(REF_CORNERS[j] + REF_CORNERS[(j + 1) % 4] + REF_CENTER) / 3 for j in range(4)]
        )
        st = np.empty((4, npts, 2))
        normals = np.empty((4, 2))
        weights = np.empty((4, npts))
        for j in range(4):
            a = REF_CORNERS[j]
            st[j] = REF_CENTER + g[:, None] * (a - REF_CENTER)
            d = (a - REF_CENTER) * scale
            n = np.array([d[1], -d[0]]) / np.hypot(*d)
            # orient out of triangle j-1 into triangle j
            step = (tri_centroids[j] - tri_centroids[j - 1]) * scale
            if n @ step < 0:
                n = -n
            normals[j] = n
            weights[j] = w * np.hypot(*d)
        self.st = st
        self.normals = normals
        self.weights = weights
        self.N = shape_values(st[..., 0], st[..., 1])  # (4, q, 4)
        self.dN = shape_gradients(st[..., 0], st[..., 1], hx, hy)  # (4, q, 4, 2)
        self.dNn = np.einsum("sqcd,sd->sqc", self.dN, normals)  # normal derivatives
        # corner weights of segment fluxes: (gamma phi_a)(T_{j-1}) - (gamma phi_a)(T_j)
        S = np.zeros((4, 4))
        for j in range(4):
            S[j, (j - 1) % 4] = 0.5
            S[j, (j + 1) % 4] = -0.5
        self.scatter = S  # (segment, corner)


def penalty_term(u, mesh: RectDualMesh, eps_pen: float) -> np.ndarray:
    """Exterior penalty ``(1/eps) int u_- gamma phi_a`` with vertex-lumped ``u_-``.

    Each dual triangle takes ``u_-`` from the vertex whose test function is
    integrated, so the term is ``w_a min(u_a, 0) / eps`` with ``w_a`` the
    integral of ``gamma phi_a``.
    """
    u = mesh.check_field(u)
    return mesh.vertex_weights * np.minimum(u, 0.0) / eps_pen


def penalty_derivative(u, mesh: RectDualMesh, eps_pen: float, at_kink: bool = True) -> np.ndarray:
    """Diagonal of the penalty Jacobian: ``(w_a / eps) [u_a < 0]``.

    With ``at_kink`` the slope ``w_a / eps`` is also used at ``u_a = 0``
    (a valid generalized derivative); Newton then resolves nodes that land
    exactly on the kink instead of stalling there.
    """
    u = mesh.check_field(u)
    active = (u <= 0) if at_kink else (u < 0)
    return mesh.vertex_weights * active / eps_pen


def gamma_jump_operator(mesh: RectDualMesh) -> sparse.csr_matrix:
    """Sparse map from nodal values to edge jumps of ``gamma v``.

    Row ``2 e + d`` holds component ``d`` of ``[gamma v]_e``; on boundary
    edges the one-sided trace ``gamma v * n`` is used.
    """
    rows, cols, vals = [], [], []
    ev = mesh.edge_vertices
    en = mesh.edge_normals
    ec = mesh.edge_cells
    for side in (0, 1):
        present = ec[:, side] >= 0
        e = np.flatnonzero(present)
        for d in (0, 1):
            for end in (0, 1):
                rows.append(2 * e + d)
                cols.append(ev[e, end])
                # trace of a bilinear on its own side: mean of the endpoints
                vals.append(0.5 * en[e, side, d])
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * mesh.num_edges, mesh.num_vertices),
    )
    A.sum_duplicates()
    A.data[np.abs(A.data) < 1e-15] = 0.0
    A.eliminate_zeros()
    return A


def interior_penalty_term(u, mesh: RectDualMesh, alpha1) -> np.ndarray:
    """Stabilization ``sum_e alpha_e [gamma u]_e . [gamma phi_a]_e``.

    ``alpha1`` is a scalar or one weight per edge.
    """
    J = gamma_jump_operator(mesh)
    alpha = np.broadcast_to(np.asarray(alpha1, dtype=float), (mesh.num_edges,))
    jumps = J @ mesh.check_field(u)
    return J.T @ (np.repeat(alpha, 2) * jumps)


def _cell_sparse(mesh, local):
    """Assemble per-cell ``(num_cells, 4, 4)`` blocks into a CSR matrix."""
    rect = mesh.rectangles
    rows = np.broadcast_to(rect[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(rect[:, None, :], local.shape).ravel()
    n = mesh.num_vertices
    return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_fve_laplacian(mesh: RectDualMesh, coefficient: float = 1.0) -> sparse.csr_matrix:
    """Flux matrix of ``-div(c grad u)`` for constant ``c``, without boundary rows."""
    quad = _SegmentQuadrature(mesh.hx, mesh.hy)
    # flux of -c grad(N_c).n through segment s, then scatter to corners
    seg = -coefficient * np.einsum("sq,sqc->sc", quad.weights, quad.dNn)
    local = np.einsum("sa,sc->ac", quad.scatter, seg)
    return _cell_sparse(mesh, np.broadcast_to(local, (mesh.num_cells, 4, 4)).copy())


def _triangle_rule(m=4):
    g, w = np.polynomial.legendre.leggauss(m)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    # collapsed (Duffy) rule on the reference triangle (0,0), (1,0), (0,1)
    a, b = np.meshgrid(g, g, indexing="ij")
    xi = a * (1.0 - b)
    eta = b
    wt = np.outer(w, w) * (1.0 - b)
    return xi.ravel(), eta.ravel(), wt.ravel()


def assemble_fve_load(mesh: RectDualMesh, f, m: int = 4) -> np.ndarray:
    """Load vector ``int f gamma phi_a`` over the dual triangles."""
    xi, eta, wt = _triangle_rule(m)
    tri = mesh.dual_triangles  # (cells, 4, 3, 2): (A_{j+1}, C, A_j)
    p0 = tri[..., 0, :]
    e1 = tri[..., 1, :] - p0
    e2 = tri[..., 2, :] - p0
    pts = p0[..., None, :] + xi[:, None] * e1[..., None, :] + eta[:, None] * e2[..., None, :]
    jac = np.abs(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])
    vals = np.asarray(f(pts[..., 0], pts[..., 1]), dtype=float)
    tri_int = (vals @ wt) * jac  # (cells, 4)
    b = np.zeros(mesh.num_vertices)
    rect = mesh.rectangles
    for j in range(4):
        half = 0.5 * tri_int[:, j]
        np.add.at(b, rect[:, j], half)
        np.add.at(b, rect[:, (j + 1) % 4], half)
    return b


@dataclass
class DiscreteSystem:
    """Linearization of the penalized scheme at one state.

    ``jac_sparse`` holds the local couplings (diffusion with frozen film,
    wedge term through the density, penalty); the film couples through
    ``coupling @ dh/du`` where ``dh/du`` is the kernel.  Dirichlet rows are
    identities in ``jac_sparse`` and zero in ``coupling``.
    """

    residual: np.ndarray
    jac_sparse: sparse.csr_matrix
    coupling: sparse.csr_matrix
    dres_dh00: np.ndarray
    kernel: KernelMatrix | None
    free: np.ndarray
    truncation: str = "adjacent-only"
    _dense_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return len(self.residual)

    @property
    def has_film_coupling(self) -> bool:
        return self.kernel is not None and self.coupling.nnz > 0

    @cached_property
    def jac_dense(self):
        """Film-coupling block: dense if untruncated, sparse if truncated."""
        if not self.has_film_coupling:
            return sparse.csr_matrix((self.size, self.size))
        if self.truncation == "none":
            return np.asarray(self.coupling @ self.kernel.entries)
        return (self.coupling @ self.kernel.truncated(ADJACENT_RADIUS)).tocsr()

    def matvec(self, v, exact: bool = True) -> np.ndarray:
        """Jacobian-vector product; ``exact`` applies the full kernel."""
        v = np.asarray(v, dtype=float)
        if not self.has_film_coupling:
            return self.jac_sparse @ v
        if exact or self.truncation == "none":
            return self.jac_sparse @ v + self.coupling @ self.kernel.apply(v)
        return self.jac_sparse @ v + self.jac_dense @ v

    def free_matrix(self):
        """Jacobian restricted to free dofs (dense array or CSR)."""
        f = self.free
        if not self.has_film_coupling:
            return self.jac_sparse[f][:, f].tocsc()
        if self.truncation == "none":
            return self.jac_sparse[f][:, f].toarray() + self.jac_dense[np.ix_(f, f)]
        return (self.jac_sparse + self.jac_dense)[f][:, f].tocsc()


class LinearFVEProblem:
    """Linear model ``-div(c grad u) = f`` with the same flux assembly.

    Used for manufactured-solution studies; ``residual`` and ``jacobian``
    mirror :class:`ReynoldsAssembler` (``h00`` is accepted and ignored).
    """

    def __init__(self, mesh: RectDualMesh, source, coefficient: float = 1.0, m: int = 4):
        self.mesh = mesh
        self.coefficient = float(coefficient)
        self.matrix = assemble_fve_laplacian(mesh, coefficient)
        self.load = assemble_fve_load(mesh, source, m) if callable(source) else np.asarray(source, float)

    def residual(self, u, h00=None) -> np.ndarray:
        mesh = self.mesh
        u = mesh.check_field(u)
        R = self.matrix @ u - self.load
        R[mesh.dirichlet_mask] = u[mesh.dirichlet_mask]
        return R

    def scaled_residual(self, R) -> np.ndarray:
        out = R / self.mesh.vertex_weights
        out[self.mesh.dirichlet_mask] = R[self.mesh.dirichlet_mask]
        return out

    def jacobian(self, u, h00=None, truncation="adjacent-only") -> DiscreteSystem:
        mesh = self.mesh
        keep = sparse.diags((~mesh.dirichlet_mask).astype(float))
        J = (keep @ self.matrix + sparse.diags(mesh.dirichlet_mask.astype(float))).tocsr()
        n = mesh.num_vertices
        return DiscreteSystem(
            residual=self.residual(u),
            jac_sparse=J,
            coupling=sparse.csr_matrix((n, n)),
            dres_dh00=np.zeros(n),
            kernel=None,
            free=mesh.free_dofs,
            truncation=truncation,
        )


class ReynoldsAssembler:
    """Penalized Reynolds operator for one mesh, kernel and operating case."""

    def __init__(self, mesh: RectDualMesh, kernel: KernelMatrix, case: OperatingCase,
                 pen: PenaltyConfig | None = None):
        kernel.check_mesh(mesh)
        if not kernel.on_vertices:
            raise ValueError("the Reynolds assembly evaluates the film at mesh vertices")
        self.mesh = mesh
        self.kernel = kernel
        self.case = case
        self.law: LubricantLaw = case.law
        self.pen = pen if pen is not None else PenaltyConfig()
        self.quad = _SegmentQuadrature(mesh.hx, mesh.hy)
        self.rigid = rigid_gap(mesh.vertices)
        self.jump_op = gamma_jump_operator(mesh)
        # the jump operator only touches boundary (Dirichlet) columns for a
        # continuous trial space; interior columns carry no jump at all
        self._jump_free = self.jump_op[:, mesh.free_dofs].nnz > 0
        self.dissipation = (
            wedge_dissipation(mesh, self.pen.beta_vec[0]) if self.pen.convection == "upwind2" else None
        )
        self.events = {"viscosity_capped": 0}

    # -- pieces ------------------------------------------------------------
    def film(self, u, h00) -> np.ndarray:
        """Nodal film thickness."""
        return h00 + self.rigid + self.kernel.apply(u)

    def _quadrature_state(self, u, h):
        q = self.quad
        cu = self.mesh.cell_values(u)
        ch = self.mesh.cell_values(h)
        U = np.einsum("sqc,ec->esq", q.N, cu)
        H = np.einsum("sqc,ec->esq", q.N, ch)
        dUn = np.einsum("sqc,ec->esq", q.dNn, cu)
        if np.any(H <= 0):
            raise DegenerateFilm("film thickness <= 0 at a flux point (min %.3g)" % H.min())
        return U, H, dUn

    def alpha1(self, eps_q) -> np.ndarray:
        """Per-edge interior penalty weight: ``10 * max eps / h_e`` by default."""
        if self.pen.alpha1 is not None:
            return np.full(self.mesh.num_edges, self.pen.alpha1)
        cell_max = eps_q.reshape(len(eps_q), -1).max(axis=1)
        ec = self.mesh.edge_cells
        emax = np.where(ec[:, 1] >= 0, np.maximum(cell_max[ec[:, 0]], cell_max[ec[:, 1]]),
                        cell_max[ec[:, 0]])
        return 10.0 * emax / self.mesh.edge_lengths

    def _segment_flux(self, U, H, dUn):
        eps, deps_du, deps_dh = epsilon_star_partials(U, H, self.law, self.case.lam)
        rho = density(U, self.law)
        bx, by = self.pen.beta_vec
        bn = self.quad.normals @ np.array([bx, by])  # (4,)
        phi = -eps * dUn + rho * H * bn[None, :, None]
        return phi, (eps, deps_du, deps_dh, rho, bn)

    def residual(self, u, h00) -> np.ndarray:
        mesh = self.mesh
        u = mesh.check_field(u, "pressure")
        h = self.film(u, h00)
        U, H, dUn = self._quadrature_state(u, h)
        phi, (eps, *_rest) = self._segment_flux(U, H, dUn)
        _, capped = viscosity(U, self.law, return_capped=True)
        if capped:
            self.events["viscosity_capped"] += 1
        seg = np.einsum("sq,esq->es", self.quad.weights, phi)
        local = seg @ self.quad.scatter  # (cells, corners)
        R = np.zeros(mesh.num_vertices)
        np.add.at(R, mesh.rectangles.ravel(), local.ravel())
        R += penalty_term(u, mesh, self.pen.eps_pen)
        if self.dissipation is not None:
            R += self.dissipation @ (density(u, self.law) * h)
        if self._jump_free:
            R += interior_penalty_term(u, mesh, self.alpha1(eps))
        # Dirichlet rows enforce u = 0
        R[mesh.dirichlet_mask] = u[mesh.dirichlet_mask]
        return R

    def scaled_residual(self, R) -> np.ndarray:
        out = R / self.mesh.vertex_weights
        out[self.mesh.dirichlet_mask] = R[self.mesh.dirichlet_mask]
        return out

    def jacobian(self, u, h00, truncation="adjacent-only") -> DiscreteSystem:
        if truncation not in TRUNCATION_POLICIES:
            raise ValueError("truncation policy must be one of %s" % (TRUNCATION_POLICIES,))
        mesh = self.mesh
        u = mesh.check_field(u, "pressure")
        R = self.residual(u, h00)
        h = self.film(u, h00)
        U, H, dUn = self._quadrature_state(u, h)
        _, (eps, deps_du, deps_dh, rho, bn) = self._segment_flux(U, H, dUn)
        q = self.quad
        drho = density_du(U, self.law)
        w = q.weights[None]
        N = q.N[None]  # (1, s, q, c)
        # d phi / d u_c and d phi / d h_c at every flux point
        dphi_du = (
            -(deps_du * dUn)[..., None] * N
            - eps[..., None] * q.dNn[None]
            + (drho * H * bn[None, :, None])[..., None] * N
        )
        dphi_dh = (-(deps_dh * dUn) + rho * bn[None, :, None])[..., None] * N
        seg_u = np.einsum("sq,esqc->esc", q.weights, dphi_du)
        seg_h = np.einsum("sq,esqc->esc", q.weights, dphi_dh)
        local_u = np.einsum("sa,esc->eac", q.scatter, seg_u)
        local_h = np.einsum("sa,esc->eac", q.scatter, seg_h)
        del w, N
        Ju = _cell_sparse(mesh, local_u)
        Ch = _cell_sparse(mesh, local_h)
        if self.dissipation is not None:
            Ju = Ju + self.dissipation @ sparse.diags(density_du(u, self.law) * h)
            Ch = Ch + self.dissipation @ sparse.diags(density(u, self.law))
        diag = penalty_derivative(u, mesh, self.pen.eps_pen)
        Ju = Ju + sparse.diags(diag)
        if self._jump_free:
            alpha = np.repeat(self.alpha1(eps), 2)
            Ju = Ju + self.jump_op.T @ sparse.diags(alpha) @ self.jump_op
        # Dirichlet rows: identity, no film coupling
        keep = sparse.diags((~mesh.dirichlet_mask).astype(float))
        Ju = (keep @ Ju + sparse.diags(mesh.dirichlet_mask.astype(float))).tocsr()
        Ch = (keep @ Ch).tocsr()
        dres_dh00 = np.asarray(Ch.sum(axis=1)).ravel()
        return DiscreteSystem(
            residual=R,
            jac_sparse=Ju,
            coupling=Ch,
            dres_dh00=dres_dh00,
            kernel=self.kernel,
            free=mesh.free_dofs,
            truncation=truncation,
        )


def assemble_residual(u, h00, mesh, kernel, law, case, pen) -> np.ndarray:
    """Residual of the penalized scheme; ``law`` overrides ``case.law`` if given."""
    if law is not None and law is not case.law:
        case = _with_law(case, law)
    return ReynoldsAssembler(mesh, kernel, case, pen).residual(u, h00)


def assemble_jacobian(u, h00, mesh, kernel, law, case, pen, trunc="adjacent-only") -> DiscreteSystem:
    if law is not None and law is not case.law:
        case = _with_law(case, law)
    return ReynoldsAssembler(mesh, kernel, case, pen).jacobian(u, h00, trunc)


def _with_law(case, law):
    from dataclasses import replace

    return replace(case, law=law)
