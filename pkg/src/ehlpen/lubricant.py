"""Lubricant material laws and dimensionless operating cases.

Pressures entering the laws are dimensionless (scaled by the Hertzian
pressure ``p_scale``).  The constants ``l1`` (Pa) and ``l2`` (1/Pa) keep their
physical units, so every law evaluates at ``p = p_scale * max(u, 0)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import InvalidConfiguration

__all__ = [
    "DEFAULT_DOMAIN",
    "DegenerateFilm",
    "LubricantLaw",
    "OperatingCase",
    "case_from_moes",
    "density",
    "density_du",
    "viscosity",
    "epsilon_star",
    "epsilon_star_partials",
    "moes_lambda",
    "moes_alpha_bar",
    "with_moes",
    "default_h00",
]

log = logging.getLogger(__name__)

DEFAULT_DOMAIN = (-2.5, 1.5, -2.0, 2.0)


class DegenerateFilm(ArithmeticError):
    """Film thickness reached zero or below; the iteration is diverging."""


@dataclass(frozen=True)
class LubricantLaw:
    rho0: float = 1.0
    eta0: float = 1.0
    l1: float = 0.59e9
    l2: float = 2.0e-8
    p_scale: float = 0.0
    exp_cap: float = 600.0

    def __post_init__(self):
        if not (self.l1 > 0 and self.l2 >= 0 and self.rho0 > 0 and self.eta0 > 0):
            raise InvalidConfiguration("lubricant law needs l1, rho0, eta0 > 0 and l2 >= 0")
        if self.p_scale < 0:
            raise InvalidConfiguration("p_scale must be nonnegative")

    @property
    def alpha_bar(self) -> float:
        """Dimensionless pressure-viscosity coefficient ``l2 * p_scale``."""
        return self.l2 * self.p_scale

    @property
    def kappa(self) -> float:
        """Dimensionless pressure over the density constant, ``p_scale / l1``."""
        return self.p_scale / self.l1


def density(u, law: LubricantLaw):
    """Density ratio rho/rho0 of the compressibility law (bounded below 1.34)."""
    p = law.kappa * np.maximum(u, 0.0)
    return (1.0 + 1.34 * p) / (1.0 + p)


def density_du(u, law: LubricantLaw):
    p = law.kappa * np.maximum(u, 0.0)
    return np.where(np.asarray(u) > 0, 0.34 * law.kappa / (1.0 + p) ** 2, 0.0)


def _viscosity_exponent(u, law: LubricantLaw):
    arg = law.alpha_bar * np.maximum(u, 0.0)
    capped = arg > law.exp_cap
    return np.minimum(arg, law.exp_cap), capped


def viscosity(u, law: LubricantLaw, return_capped: bool = False):
    """Viscosity ratio eta/eta0 of the exponential pressure-viscosity law.

    The exponent is capped at ``law.exp_cap``; with ``return_capped`` the cap
    event is returned alongside the value.
    """
    arg, capped = _viscosity_exponent(u, law)
    eta = np.exp(arg)
    if return_capped:
        return eta, bool(np.any(capped))
    return eta


def epsilon_star(u, h_d, law: LubricantLaw, lam: float):
    """Reynolds diffusion coefficient ``rho h^3 / (eta lambda)`` (ratios)."""
    h_d = np.asarray(h_d, dtype=float)
    if np.any(h_d <= 0):
        raise DegenerateFilm("film thickness <= 0 (min %.3g)" % float(np.min(h_d)))
    rho = density(u, law) * law.rho0
    eta = viscosity(u, law) * law.eta0
    return rho * h_d**3 / (eta * lam)


def epsilon_star_partials(u, h_d, law: LubricantLaw, lam: float):
    """``(eps, d eps/d u, d eps/d h)`` at matching points."""
    h_d = np.asarray(h_d, dtype=float)
    if np.any(h_d <= 0):
        raise DegenerateFilm("film thickness <= 0 (min %.3g)" % float(np.min(h_d)))
    u = np.asarray(u, dtype=float)
    rho = density(u, law)
    drho = density_du(u, law)
    arg, capped = _viscosity_exponent(u, law)
    inv_eta = np.exp(-arg)
    # d(1/eta)/du = -alpha_bar/eta where the exponent is live
    dinv_eta = np.where((u > 0) & ~capped, -law.alpha_bar * inv_eta, 0.0)
    scale = law.rho0 / (law.eta0 * lam)
    h3 = h_d**3
    eps = scale * rho * h3 * inv_eta
    deps_du = scale * h3 * (drho * inv_eta + rho * dinv_eta)
    deps_dh = scale * 3.0 * h_d**2 * rho * inv_eta
    return eps, deps_du, deps_dh


def moes_lambda(M: float) -> float:
    """Speed parameter of the dimensionless point-contact Reynolds equation."""
    return (128.0 * math.pi**3 / (3.0 * M**4)) ** (1.0 / 3.0)


def moes_alpha_bar(M: float, L: float) -> float:
    """Dimensionless pressure-viscosity coefficient ``alpha * p_h``."""
    return L / math.pi * (1.5 * M) ** (1.0 / 3.0)


@dataclass(frozen=True)
class OperatingCase:
    M: float
    L: float
    lam: float
    alpha_bar: float
    domain_bounds: tuple[float, float, float, float] = DEFAULT_DOMAIN
    h00_init: float = -0.5
    law: LubricantLaw = field(default_factory=LubricantLaw)

    def __post_init__(self):
        if not (self.M > 0 and self.L >= 0 and self.lam > 0):
            raise InvalidConfiguration(
                "operating case needs M > 0, L >= 0, lambda > 0 (got M=%r, L=%r, lambda=%r)"
                % (self.M, self.L, self.lam)
            )

    def with_law(self, **changes) -> "OperatingCase":
        return replace(self, law=replace(self.law, **changes))


def case_from_moes(M, L, domain_bounds=DEFAULT_DOMAIN, h00_init=None, law=None) -> OperatingCase:
    """Operating case for Moes load parameter ``M`` and material parameter ``L``.

    The Hertzian pressure used by the material laws follows from
    ``alpha_bar = l2 * p_scale``; with ``L = 0`` the laws become isoviscous
    and incompressible.
    """
    if not (M > 0):
        raise InvalidConfiguration("Moes load parameter M must be positive, got %r" % (M,))
    if not (L >= 0):
        raise InvalidConfiguration("Moes material parameter L must be >= 0, got %r" % (L,))
    base = law if law is not None else LubricantLaw()
    lam = moes_lambda(M)
    alpha_bar = moes_alpha_bar(M, L)
    law = replace(base, p_scale=alpha_bar / base.l2 if base.l2 > 0 else 0.0)
    if h00_init is None:
        h00_init = default_h00(M, L)
    return OperatingCase(
        M=float(M),
        L=float(L),
        lam=lam,
        alpha_bar=alpha_bar,
        domain_bounds=tuple(float(b) for b in domain_bounds),
        h00_init=float(h00_init),
        law=law,
    )


def with_moes(case: OperatingCase, M=None, L=None) -> OperatingCase:
    """Copy of ``case`` with new Moes parameters (laws and scales recomputed)."""
    return case_from_moes(
        case.M if M is None else M,
        case.L if L is None else L,
        case.domain_bounds,
        case.h00_init,
        case.law,
    )


def default_h00(M, L) -> float:
    """Rigid-contact starting offset.

    Under the Hertzian pressure the elastic term lifts the gap by one unit in
    the contact, so the offset is the target central film minus one.  The
    central film comes from the rigid-isoviscous Moes asymptote, clipped to a
    safe band; the force-balance update corrects it during the solve.
    """
    h_central = 1.7 * M ** (-1.0 / 9.0) * (1.5 * M) ** (-2.0 / 3.0) * (1.0 + 0.1 * L) ** 0.5
    return float(np.clip(h_central, 0.05, 1.0) - 1.0)
