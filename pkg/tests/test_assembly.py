import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from ehlpen.assembly import (
    LinearFVEProblem,
    PenaltyConfig,
    ReynoldsAssembler,
    assemble_fve_laplacian,
    assemble_fve_load,
    assemble_jacobian,
    assemble_residual,
    gamma_jump_operator,
    interior_penalty_term,
    penalty_derivative,
    penalty_term,
    wedge_dissipation,
)
from ehlpen.deformation import build_kernel
from ehlpen.lubricant import case_from_moes, epsilon_star
from ehlpen.mesh import build_mesh

DOMAIN = (-2.5, 1.5, -2.0, 2.0)
UNIT = (0.0, 1.0, 0.0, 1.0)


@pytest.fixture(scope="module")
def setup8():
    mesh = build_mesh(DOMAIN, 8, 8)
    return mesh, build_kernel(mesh), case_from_moes(7, 10)


def random_state(mesh, seed):
    u = np.random.default_rng(seed).uniform(0.05, 1.0, mesh.num_vertices)
    return mesh.apply_dirichlet(u)


def five_point_skew(n):
    """Oracle stencil on an n x n square grid: 2 at the centre, -1/2 on the diagonals."""
    m = n + 1
    A = np.zeros((m * m, m * m))
    for j in range(m):
        for i in range(m):
            r = j * m + i
            A[r, r] = 2.0
            for di, dj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                if 0 <= i + di < m and 0 <= j + dj < m:
                    A[r, (j + dj) * m + i + di] = -0.5
    return A


def test_fve_laplacian_matches_stencil_oracle():
    mesh = build_mesh(UNIT, 8, 8)
    A = assemble_fve_laplacian(mesh).toarray()
    f = mesh.free_dofs
    np.testing.assert_allclose(A[np.ix_(f, f)], five_point_skew(8)[np.ix_(f, f)], atol=1e-13)


def test_fve_load_of_constant_is_vertex_weight():
    mesh = build_mesh(DOMAIN, 5, 4)
    b = assemble_fve_load(mesh, lambda x, y: np.full_like(x, 3.0))
    np.testing.assert_allclose(b, 3.0 * mesh.vertex_weights, rtol=1e-13)


def test_manufactured_interpolant_residual_small():
    exact = lambda x, y: x * (1 - x) * y * (1 - y)
    f = lambda x, y: 2.0 * (x * (1 - x) + y * (1 - y))
    res = []
    for n in (8, 16, 32):
        mesh = build_mesh(UNIT, n, n)
        prob = LinearFVEProblem(mesh, f)
        R = prob.scaled_residual(prob.residual(exact(*mesh.vertices.T)))
        res.append(np.abs(R).max())
    assert res[-1] < 2e-3
    assert res[0] / res[-1] > 10  # second-order consistency of the scheme


def test_poisson_limit_jacobian_is_stiffness():
    mesh = build_mesh(UNIT, 6, 6)
    prob = LinearFVEProblem(mesh, lambda x, y: np.ones_like(x))
    sysm = prob.jacobian(np.zeros(mesh.num_vertices))
    f = mesh.free_dofs
    A = assemble_fve_laplacian(mesh)
    assert abs(sysm.jac_sparse[f][:, f] - A[f][:, f]).max() == 0.0
    assert not sysm.has_film_coupling


def centered_wedge_oracle(mesh, h):
    """(1/2) sum over triangles touching a of int_T d/dx of the bilinear film."""
    g, w = np.polynomial.legendre.leggauss(6)
    g, w = 0.5 * (g + 1), 0.5 * w
    A, B = np.meshgrid(g, g, indexing="ij")
    xi, eta, wt = (A * (1 - B)).ravel(), B.ravel(), (np.outer(w, w) * (1 - B)).ravel()
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    c = np.array([0.5, 0.5])
    out = np.zeros(mesh.num_vertices)
    hv = h[mesh.rectangles]
    for j in range(4):
        p0, p1, p2 = corners[(j + 1) % 4], c, corners[j]
        s = p0[0] + xi * (p1[0] - p0[0]) + eta * (p2[0] - p0[0])
        t = p0[1] + xi * (p1[1] - p0[1]) + eta * (p2[1] - p0[1])
        area = 0.5 * abs((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]))
        dhdx = ((hv[:, 1] - hv[:, 0])[:, None] * (1 - t) + (hv[:, 2] - hv[:, 3])[:, None] * t) / mesh.hx
        I = (dhdx @ wt) * 2 * area * mesh.hx * mesh.hy
        np.add.at(out, mesh.rectangles[:, j], 0.5 * I)
        np.add.at(out, mesh.rectangles[:, (j + 1) % 4], 0.5 * I)
    return out


def test_zero_pressure_leaves_only_wedge_term(setup8):
    mesh, kernel, case = setup8
    u = np.zeros(mesh.num_vertices)
    h00 = 0.4
    pen = PenaltyConfig(convection="centered")
    R = assemble_residual(u, h00, mesh, kernel, None, case, pen)
    h = h00 + 0.5 * (mesh.vertices**2).sum(axis=1)
    oracle = centered_wedge_oracle(mesh, h)
    f = mesh.free_dofs
    np.testing.assert_allclose(R[f], oracle[f], rtol=1e-12, atol=1e-14)
    # upwind2 adds exactly the third-difference correction of rho h
    R2 = assemble_residual(u, h00, mesh, kernel, None, case, PenaltyConfig())
    np.testing.assert_allclose(R2 - R, wedge_dissipation(mesh) @ h, atol=1e-13)


def test_dissipation_vanishes_on_quadratics():
    mesh = build_mesh(DOMAIN, 10, 6)
    x, y = mesh.vertices.T
    D = wedge_dissipation(mesh)
    np.testing.assert_allclose(D @ (1 + 2 * x - x**2 + x * y + 3 * y**2), 0.0, atol=1e-12)
    assert np.abs(D @ x**3).max() > 0


def test_penalty_zero_for_nonnegative(setup8):
    mesh, kernel, case = setup8
    u = random_state(mesh, 0)
    assert np.all(penalty_term(u, mesh, 1e-6) == 0.0)
    h = 0.4
    R_pen = assemble_residual(u, h, mesh, kernel, None, case, PenaltyConfig(eps_pen=1e-2))
    R_ref = assemble_residual(u, h, mesh, kernel, None, case, PenaltyConfig(eps_pen=1e-6))
    np.testing.assert_array_equal(R_pen, R_ref)


@pytest.mark.parametrize("c,eps", [(1.0, 1e-2), (0.3, 1e-6), (2.5, 1.0)])
def test_penalty_mass_of_negative_constant(c, eps):
    mesh = build_mesh(UNIT, 7, 5)
    xi = penalty_term(np.full(mesh.num_vertices, -c), mesh, eps)
    assert xi.sum() == pytest.approx(-c / eps, rel=1e-12)


@given(st.integers(0, 2**31), st.floats(1e-8, 1.0))
@settings(max_examples=100, deadline=None)
def test_penalty_monotone(seed, eps):
    mesh = build_mesh(UNIT, 6, 6)
    rng = np.random.default_rng(seed)
    u1, u2 = rng.normal(size=(2, mesh.num_vertices))
    d = (penalty_term(u1, mesh, eps) - penalty_term(u2, mesh, eps)) @ (u1 - u2)
    assert d >= -1e-12 * abs(d)


def test_penalty_derivative_diagonal_nonnegative():
    mesh = build_mesh(UNIT, 4, 4)
    u = np.random.default_rng(1).normal(size=mesh.num_vertices)
    d = penalty_derivative(u, mesh, 1e-3)
    assert np.all(d >= 0)
    np.testing.assert_array_equal(d > 0, u <= 0)
    assert penalty_derivative(np.zeros(mesh.num_vertices), mesh, 1.0, at_kink=False).sum() == 0


def test_jump_operator_sees_only_boundary_columns():
    mesh = build_mesh(DOMAIN, 6, 5)
    J = gamma_jump_operator(mesh)
    assert J[:, mesh.free_dofs].nnz == 0
    u = mesh.apply_dirichlet(np.random.default_rng(2).random(mesh.num_vertices))
    np.testing.assert_array_equal(interior_penalty_term(u, mesh, 5.0), 0.0)


def _fd_check(mesh, kernel, case, u, h00, seed):
    asm = ReynoldsAssembler(mesh, kernel, case, PenaltyConfig())
    sysm = asm.jacobian(u, h00, truncation="none")
    rng = np.random.default_rng(seed)
    d = mesh.apply_dirichlet(rng.normal(size=mesh.num_vertices))
    t = 1e-6
    fd = (asm.residual(u + t * d, h00) - asm.residual(u, h00)) / t
    jv = sysm.matvec(d, exact=True)
    err_u = np.linalg.norm(fd - jv) / np.linalg.norm(jv)
    fd_h = (asm.residual(u, h00 + t) - asm.residual(u, h00)) / t
    err_h = np.linalg.norm(fd_h - sysm.dres_dh00) / np.linalg.norm(sysm.dres_dh00)
    return err_u, err_h, sysm


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_jacobian_matches_finite_differences(setup8, seed):
    mesh, kernel, case = setup8
    u = random_state(mesh, 10 + seed)
    err_u, err_h, sysm = _fd_check(mesh, kernel, case, u, 0.3, seed)
    assert err_u <= 1e-4 and err_h <= 1e-4
    # dense product path agrees with the matrix-free one
    d = mesh.apply_dirichlet(np.random.default_rng(seed).normal(size=mesh.num_vertices))
    dense = sysm.jac_sparse @ d + sysm.jac_dense @ d
    np.testing.assert_allclose(dense, sysm.matvec(d), rtol=1e-10, atol=1e-12)


def test_truncation_policies_share_sparse_part(setup8):
    mesh, kernel, case = setup8
    u = random_state(mesh, 5)
    a = assemble_jacobian(u, 0.3, mesh, kernel, None, case, PenaltyConfig(), trunc="none")
    b = assemble_jacobian(u, 0.3, mesh, kernel, None, case, PenaltyConfig(), trunc="adjacent-only")
    assert abs(a.jac_sparse - b.jac_sparse).max() == 0.0
    assert abs(a.coupling - b.coupling).max() == 0.0
    full = np.asarray(a.jac_dense)
    trunc = b.jac_dense.toarray()
    assert sparse.issparse(b.jac_dense) and not sparse.issparse(a.jac_dense)
    assert np.count_nonzero(trunc) < np.count_nonzero(full)
    np.testing.assert_allclose(full, a.coupling @ kernel.entries, rtol=1e-13)
    np.testing.assert_allclose(trunc, (b.coupling @ kernel.truncated(2)).toarray(), rtol=1e-13)


def test_sparse_pattern_within_adjacency(setup8):
    mesh, kernel, case = setup8
    J = assemble_jacobian(random_state(mesh, 3), 0.3, mesh, kernel, None, case, PenaltyConfig()).jac_sparse
    r, c = J.nonzero()
    nx1 = mesh.nx + 1
    di = np.abs(r % nx1 - c % nx1)
    dj = np.abs(r // nx1 - c // nx1)
    assert np.all(dj <= 1)
    # element neighbours plus the two upstream points of the wedge correction
    assert np.all((di <= 1) | ((dj == 0) & (di <= 2)))


def test_coercivity_smallest_eigenvalue_positive():
    mesh = build_mesh(DOMAIN, 6, 6)
    kernel = build_kernel(mesh)
    case = case_from_moes(7, 10)
    u = random_state(mesh, 7)
    asm = ReynoldsAssembler(mesh, kernel, case)
    # diffusion form with epsilon* frozen at the state u
    U, H, _ = asm._quadrature_state(u, asm.film(u, 0.5))
    eps = epsilon_star(U, H, case.law, case.lam)
    q = asm.quad
    seg = -np.einsum("sq,esq,sqc->esc", q.weights, eps, q.dNn)
    local = np.einsum("sa,esc->eac", q.scatter, seg)
    rect = mesh.rectangles
    K = np.zeros((mesh.num_vertices,) * 2)
    for e in range(mesh.num_cells):
        K[np.ix_(rect[e], rect[e])] += local[e]
    # default alpha1 adds nothing for a continuous trial space
    alpha = asm.alpha1(eps)
    K += (asm.jump_op.T @ sparse.diags(np.repeat(alpha, 2)) @ asm.jump_op).toarray()
    f = mesh.free_dofs
    sym = 0.5 * (K + K.T)[np.ix_(f, f)]
    assert np.linalg.eigvalsh(sym).min() > 0


def test_bad_penalty_settings():
    with pytest.raises(ValueError):
        PenaltyConfig(eps_pen=0.0)
    with pytest.raises(ValueError):
        PenaltyConfig(alpha1=-1.0)
    with pytest.raises(ValueError):
        PenaltyConfig(convection="upwind2", beta_vec=(0.0, 1.0))
    with pytest.raises(ValueError):
        PenaltyConfig(convection="quick")


def test_truncation_policy_validated(setup8):
    mesh, kernel, case = setup8
    with pytest.raises(ValueError):
        ReynoldsAssembler(mesh, kernel, case).jacobian(random_state(mesh, 1), 0.3, truncation="far")
