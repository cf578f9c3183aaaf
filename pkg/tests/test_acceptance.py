"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <id> PASS|FAIL`` line.  Criteria that the
implementation does not meet keep their full tolerance and are marked as
strict expected failures; the analysis lives in the decisions ledger.
"""

import math
import time

import numpy as np
import pytest

from conftest import ehl_study, solved
from ehlpen import cli
from ehlpen.assembly import ReynoldsAssembler, PenaltyConfig, penalty_term
from ehlpen.deformation import build_kernel, film_thickness, singular_panel_integral
from ehlpen.lubricant import case_from_moes
from ehlpen.mesh import build_mesh
from ehlpen.solver import force_integral, hertz_guess
from ehlpen.verify import (
    complementarity_report,
    convergence_study,
    poisson_manufactured,
    reference_rate_fit,
)

DOMAIN = (-2.5, 1.5, -2.0, 2.0)


@pytest.fixture
def report(capsys):
    def emit(cid, ok, detail):
        with capsys.disabled():
            print("\nACCEPTANCE %s %s: %s" % (cid, "PASS" if ok else "FAIL", detail))
        return ok

    return emit


def test_1a_manufactured_rates(report):
    fit, _ = convergence_study(poisson_manufactured(), [16, 32, 64, 128])
    s1, s2 = fit.slope["H1"], fit.slope["L2"]
    ok = 0.8 <= s1 <= 1.2 and 1.75 <= s2 <= 2.25
    report("1a", ok, "manufactured slopes H1=%.4f in [0.8,1.2], L2=%.4f in [1.75,2.25]" % (s1, s2))
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="EHL rates are pre-asymptotic on 16..128; see ledger")
def test_1b_ehl_rates(report):
    t0 = time.perf_counter()
    fit, details = ehl_study()
    elapsed = time.perf_counter() - t0
    s1, s2 = fit.slope["H1"], fit.slope["L2"]
    ok = 0.75 <= s1 <= 1.25 and 1.6 <= s2 <= 2.4 and elapsed < 600
    up = reference_rate_fit([details["results"][(n, n)] for n in (16, 32, 64, 128)],
                            details["reference"], "prolong")
    report("1b", ok, "EHL M=7 L=10 slopes H1=%.4f in [0.75,1.25], L2=%.4f in [1.6,2.4], %.0f s "
           "(measured on the fine mesh instead: H1=%.4f, L2=%.4f)"
           % (s1, s2, elapsed, up.slope["H1"], up.slope["L2"]))
    assert ok


def test_2_singular_quadrature(report):
    exact = 2 * math.log(1 + math.sqrt(2))
    one = lambda x, y: 1.0
    err = abs(singular_panel_integral(one, 0.5, 20, 4) - exact)
    seq = [abs(singular_panel_integral(one, 0.5, n, 4) - exact) for n in (2, 4, 8, 16)]
    mono = all(b < a for a, b in zip(seq, seq[1:]))
    ok = err <= 1e-6 and mono
    report("2", ok, "|err|=%.3e at n=20, monotone over n=2,4,8,16: %s" % (err, mono))
    assert ok


def test_3_penalty_behaviour(report):
    res = solved(7.0, 10.0, 64)
    neg_inf = float(np.max(np.maximum(-res.u, 0.0)))
    rng = np.random.default_rng(2024)
    mesh = build_mesh(DOMAIN, 16, 16)
    gaps = []
    for _ in range(20):
        u = rng.normal(size=mesh.num_vertices)
        gaps.append(complementarity_report(u, mesh, 1e-6)["identity_gap"])
    mono = []
    for _ in range(100):
        u1, u2 = rng.normal(size=(2, mesh.num_vertices))
        d = (penalty_term(u1, mesh, 1e-6) - penalty_term(u2, mesh, 1e-6)) @ (u1 - u2)
        mono.append(d >= 0)
    ok = res.converged and neg_inf <= 1e-4 and max(gaps) <= 1e-12 and all(mono)
    report("3", ok, "||u-||_inf=%.3e, identity gap %.2e, monotone pairs %d/100"
           % (neg_inf, max(gaps), sum(mono)))
    assert ok


def test_4_force_balance(report):
    res = solved(7.0, 10.0, 64)
    gap = abs(force_integral(res.u, res.mesh) - 2 * math.pi / 3)
    errs, hs = [], []
    for n in (64, 128):
        mesh = build_mesh((-1.5, 1.5, -1.5, 1.5), n, n)
        errs.append(abs(force_integral(hertz_guess(mesh), mesh) - 2 * math.pi / 3))
        hs.append(mesh.h)
    ratio, h_ratio = errs[0] / errs[1], hs[0] / hs[1]
    first_order = all(e <= 0.05 * h for e, h in zip(errs, hs)) and 0.75 * h_ratio <= ratio <= 1.5 * h_ratio
    ok = res.converged and gap <= 1e-6 and first_order
    report("4", ok, "force gap %.2e; hemisphere errors %.2e, %.2e (ratio %.2f vs h ratio %.1f)"
           % (gap, errs[0], errs[1], ratio, h_ratio))
    assert ok


def test_5_jacobian_fd(report):
    mesh = build_mesh(DOMAIN, 8, 8)
    kernel = build_kernel(mesh)
    asm = ReynoldsAssembler(mesh, kernel, case_from_moes(7, 10), PenaltyConfig())
    rng = np.random.default_rng(5)
    errs = []
    for _ in range(3):
        u = mesh.apply_dirichlet(rng.uniform(0.0, 1.0, mesh.num_vertices))
        h00 = 0.3
        sysm = asm.jacobian(u, h00, truncation="none")
        d = mesh.apply_dirichlet(rng.normal(size=mesh.num_vertices))
        t = 1e-6
        fd = (asm.residual(u + t * d, h00) - asm.residual(u, h00)) / t
        jv = sysm.jac_sparse @ d + sysm.jac_dense @ d
        errs.append(np.linalg.norm(fd - jv) / np.linalg.norm(jv))
    ok = max(errs) <= 1e-4
    report("5", ok, "max relative FD mismatch %.2e over 3 states" % max(errs))
    assert ok


def test_6_kernel_structure(report):
    mesh = build_mesh(DOMAIN, 8, 8)
    kernel = build_kernel(mesh, method="dense")
    G = kernel.entries
    nx1 = mesh.nx + 1
    J, I = np.divmod(np.arange(mesh.num_vertices), nx1)
    groups = {}
    for k in np.flatnonzero(~mesh.dirichlet_mask):
        for r in range(mesh.num_vertices):
            groups.setdefault((I[r] - I[k], J[r] - J[k]), []).append(G[r, k])
    toeplitz = max(np.ptp(v) / max(v) for v in groups.values())
    nonneg = bool(np.all(G >= 0))
    rng = np.random.default_rng(6)
    p = mesh.apply_dirichlet(rng.random(mesh.num_vertices))
    alpha = rng.normal()
    base = film_thickness(0.2, 0 * p, kernel)
    lhs = film_thickness(0.2, alpha * p, kernel) - base
    rhs = alpha * (film_thickness(0.2, p, kernel) - base)
    lin = np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)
    ok = toeplitz <= 1e-12 and nonneg and lin <= 1e-12
    report("6", ok, "Toeplitz spread %.2e, nonnegative %s, linearity %.2e" % (toeplitz, nonneg, lin))
    assert ok


def _outflow_strip_max(res):
    mesh = res.mesh
    x = mesh.vertices[:, 0]
    strip = (x >= mesh.domain_bounds[1] - 2 * mesh.hx) & ~mesh.dirichlet_mask
    return float(np.max(res.u[strip]))


def test_7a_regimes_converge_compact(report):
    a, b = solved(7.0, 10.0, 64), solved(20.0, 10.0, 64)
    strips = (_outflow_strip_max(a), _outflow_strip_max(b))
    ok = a.converged and b.converged and max(strips) < 1e-8
    report("7a", ok, "M=7 and M=20 converged: %s, %s; outflow strip max u %.2e, %.2e"
           % (a.converged, b.converged, *strips))
    assert ok


@pytest.mark.xfail(strict=True, reason="dimensionless max pressure falls with M at fixed L; see ledger")
def test_7b_load_ordering(report):
    a, b = solved(7.0, 10.0, 64), solved(20.0, 10.0, 64)
    ok = b.u.max() > a.u.max()
    report("7b", ok, "max u M=20 %.4f > M=7 %.4f" % (b.u.max(), a.u.max()))
    assert ok


def test_8_determinism(report, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / ("r%d" % k)
        codes = (
            cli.main(["run", "--out", str(out / "run"), "--mesh", "32", "32"]),
            cli.main(["convergence", "--out", str(out / "conv")]),
            cli.main(["kernel-check", "--out", str(out / "kc")]),
        )
        assert codes == (0, 0, 0)
        runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same = runs[0].keys() == runs[1].keys() and all(runs[0][k] == runs[1][k] for k in runs[0])
    report("8", same, "%d artifacts bitwise identical across runs: %s" % (len(runs[0]), same))
    assert same
