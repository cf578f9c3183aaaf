import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehlpen.lubricant import (
    LubricantLaw,
    case_from_moes,
    density,
    density_du,
    epsilon_star,
    epsilon_star_partials,
    moes_lambda,
    viscosity,
    with_moes,
)
from ehlpen.mesh import InvalidConfiguration

# unit pressure scale with material constants chosen for readable numbers
RAW = LubricantLaw(l1=1.0, l2=1.0, p_scale=1.0)


def test_density_examples():
    assert density(0.0, RAW) == 1.0
    assert density(RAW.l1, RAW) == pytest.approx(1.17)
    assert density(1e12, RAW) == pytest.approx(1.34, rel=1e-9)


def test_viscosity_examples():
    assert viscosity(0.0, RAW) == 1.0
    assert viscosity(math.log(2.0), RAW) == pytest.approx(2.0)
    assert viscosity(1.0, RAW) == pytest.approx(math.e)


def test_epsilon_star_examples():
    law = LubricantLaw(l1=1.0, l2=0.0, p_scale=1.0)
    assert epsilon_star(0.0, 2.0, law, 1.0) == pytest.approx(8.0)
    assert epsilon_star(0.0, 1.0, RAW, 1.0) == pytest.approx(1.0)
    assert epsilon_star(50.0, 1.0, RAW, 1.0) < 1e-20


def test_negative_pressure_clamped():
    assert density(-3.0, RAW) == 1.0
    assert viscosity(-3.0, RAW) == 1.0


@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=40))
@settings(max_examples=50, deadline=None)
def test_density_monotone_bounded(u):
    u = np.sort(np.asarray(u))
    r = density(u, RAW)
    assert np.all(np.diff(r) >= -1e-15)
    assert np.all(r >= 1.0) and np.all(r < 1.34)


@given(st.floats(0, 30), st.floats(0, 30))
def test_viscosity_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert viscosity(lo, RAW) <= viscosity(hi, RAW)


@given(st.floats(0.0, 5.0), st.floats(0.05, 3.0))
@settings(max_examples=60, deadline=None)
def test_epsilon_star_monotonicity_fd(u, h):
    d = 1e-6
    e = lambda uu, hh: epsilon_star(uu, hh, RAW, 1.0)
    assert e(u, h + d) > e(u, h)
    assert e(u + d, h) < e(u, h)


def test_partials_match_finite_differences():
    rng = np.random.default_rng(0)
    u = rng.uniform(0.05, 2.0, 20)
    h = rng.uniform(0.2, 2.0, 20)
    lam = 0.7
    e, du, dh = epsilon_star_partials(u, h, RAW, lam)
    d = 1e-7
    np.testing.assert_allclose(e, epsilon_star(u, h, RAW, lam))
    np.testing.assert_allclose(du, (epsilon_star(u + d, h, RAW, lam) - epsilon_star(u - d, h, RAW, lam)) / (2 * d), rtol=1e-6)
    np.testing.assert_allclose(dh, (epsilon_star(u, h + d, RAW, lam) - epsilon_star(u, h - d, RAW, lam)) / (2 * d), rtol=1e-6)
    np.testing.assert_allclose(density_du(u, RAW), (density(u + d, RAW) - density(u - d, RAW)) / (2 * d), rtol=1e-6)


def test_moes_cases():
    c7 = case_from_moes(7, 10)
    c20 = case_from_moes(20, 10)
    assert np.isfinite(c7.lam) and c7.lam > 0
    assert c20.lam < c7.lam
    c0 = case_from_moes(7, 0)
    assert c0.alpha_bar == 0.0
    assert viscosity(1.0, c0.law) == 1.0
    assert moes_lambda(7) == pytest.approx((128 * math.pi**3 / (3 * 7**4)) ** (1 / 3))


def test_with_moes_recomputes_scales():
    c = case_from_moes(7, 10, h00_init=-0.3)
    d = with_moes(c, L=5)
    assert d.L == 5 and d.M == 7 and d.h00_init == -0.3
    assert d.alpha_bar == pytest.approx(c.alpha_bar / 2)


@pytest.mark.parametrize("M,L", [(0, 10), (-1, 10), (7, -1)])
def test_invalid_moes(M, L):
    with pytest.raises(InvalidConfiguration):
        case_from_moes(M, L)


def test_invalid_law():
    with pytest.raises(InvalidConfiguration):
        LubricantLaw(l1=-1.0)
