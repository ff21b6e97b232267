"""A-priori bounds: explosion-time lower bounds and solution caps.

Two pairs are computed:

* ``(h_circ, M_h_circ)``: the largest Picard step for which the truncated
  solution and its scaled gradient stay below ``M_h_circ``.
* ``(h_prime, M_h_prime)``: the step below which the branching estimator has
  finite fourth moments, from the closed-form constants ``C1_hat``, ``C2_hat``.

All bounds are one-sided over-estimates; they only gate configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .driver import LocalPolynomialDriver, sup_f_circ
from .errors import BoundViolationError, ConfigurationError, InfeasibleBoundsError
from .sde import SdeCoefficients

VARRHO = 4


@dataclass
class BoundConstants:
    M: float
    C_mu_sigma: float
    f_sup: Callable[[float], float]
    C1_hat: float = math.nan
    C2_hat: float = math.nan
    card_L: int = 1
    varrho: int = VARRHO

    def __post_init__(self):
        if self.varrho != VARRHO:
            raise ValueError("the moment order is fixed at 4")
        if not (self.M > 0 and math.isfinite(self.M)):
            raise ValueError("M must be positive and finite")
        if not (self.C_mu_sigma >= 0 and math.isfinite(self.C_mu_sigma)):
            raise ValueError("C_mu_sigma must be finite and non-negative")


def c_bdg(varrho: int = VARRHO) -> float:
    """Burkholder-Davis-Gundy upper constant for continuous martingales.

    ``(r (r - 1) / 2)**(r / 2) * (r / (r - 1))**(r**2 / 2)``; any valid upper
    constant would do since every bound here is one-sided.
    """
    r = float(varrho)
    return (r * (r - 1.0) / 2.0) ** (r / 2.0) * (r / (r - 1.0)) ** (r * r / 2.0)


def eigen_bounds(coef: SdeCoefficients, box, n: int = 4001, margin: float = 0.1) -> dict:
    """Sampled spectral bounds of ``D mu`` and ``D sigma`` with a safety margin.

    ``lam_dmu`` bounds ``|D mu|``; ``lam_dsigma`` bounds ``max_i |D sigma_i|^2``;
    ``lam_inv_ssT`` is ``a0**-2``.
    """
    norms = coef.sup_norms(box, n=n)
    return {
        "lam_dmu": (1.0 + margin) * norms["d_mu"],
        "lam_dsigma": (1.0 + margin) * norms["d_sigma"] ** 2,
        "lam_inv_ssT": coef.a0 ** -2.0,
        "mu_sup": (1.0 + margin) * norms["mu"],
        "sigma_sup": (1.0 + margin) * norms["sigma"],
        "dsigma_sup": (1.0 + margin) * norms["d_sigma"],
    }


def c_mu_sigma(coef: SdeCoefficients, horizon: float, box, n: int = 4001) -> float:
    """Growth constant of the tangent flow and of the gradient representation.

    ``c = |D mu| + d |D sigma|^2 / 2`` controls ``E|grad X_s grad X_t^{-1}|``;
    the returned value also dominates ``sqrt(d)/a0 * exp(2 c T)``, which
    bounds the Malliavin-weight constant.
    """
    nb = coef.sup_norms(box, n=n)
    c = nb["d_mu"] + coef.d * nb["d_sigma"] ** 2 / 2.0
    return max(c, math.sqrt(coef.d) / coef.a0 * math.exp(2.0 * c * horizon))


def m_h_circ(bc: BoundConstants, h: float, cap: float = 1e12, iters: int = 10_000) -> float:
    """Smallest ``M'`` with ``M' >= M + S(M') h`` and ``M' >= M e^{Ch} + C S(M') sqrt(h)``.

    Fixed-point iteration from ``M``; returns ``inf`` when it runs past ``cap``.
    """
    M, C = bc.M, bc.C_mu_sigma
    mp = M
    for _ in range(iters):
        s = bc.f_sup(mp)
        nxt = max(M + s * h, M * math.exp(C * h) + C * s * math.sqrt(h), mp)
        if not math.isfinite(nxt) or nxt > cap:
            return math.inf
        if nxt <= mp * (1.0 + 1e-15):
            return nxt
        mp = nxt
    return math.inf


def compute_h_circ(bc: BoundConstants, h_top: float, tol: float = 1e-10) -> tuple[float, float]:
    """Largest feasible step on ``(0, h_top]`` (bisection) and its ``M_h_circ``."""
    if math.isfinite(m_h_circ(bc, h_top)):
        return h_top, m_h_circ(bc, h_top)
    lo, hi = 0.0, h_top
    while hi - lo > tol * h_top:
        mid = 0.5 * (lo + hi)
        if math.isfinite(m_h_circ(bc, mid)):
            lo = mid
        else:
            hi = mid
    if lo <= 1e-9 * h_top:
        raise InfeasibleBoundsError("no step size admits a finite M_h_circ (driver too large)")
    return lo, m_h_circ(bc, lo)


def c_zero(horizon: float, lam_dmu: float, lam_dsigma: float, d: int, varrho: int = VARRHO) -> float:
    r = float(varrho)
    c_q = r * lam_dmu + d * r * (r - 1.0) * lam_dsigma / 2.0
    return (
        9.0 ** (r - 1.0)
        * (1.0 + (r / (r - 1.0)) ** r)
        * (1.0 + (1.0 + abs(lam_dmu * horizon) ** r * math.exp(c_q * horizon)))
    )


def compute_C_hats(
    bc: BoundConstants,
    coef: SdeCoefficients,
    drv: LocalPolynomialDriver,
    horizon: float,
    box,
    lifetime: str = "truncated-power",
    probs=None,
) -> tuple[float, float]:
    """Closed-form upper bounds ``(C1_hat, C2_hat)`` for the estimator moments.

    ``C2_hat`` carries the density factor ``sup_t (|c|/p * t^{-2/3} / rho(t))^3``;
    it is finite only for the truncated-power density, where
    ``t^{-2/3} / rho(t) = 3``.
    """
    r = float(bc.varrho)
    eb = eigen_bounds(coef, box)
    for key in ("lam_dmu", "lam_dsigma", "lam_inv_ssT", "mu_sup"):
        if not math.isfinite(eb[key]):
            raise BoundViolationError(f"unbounded coefficient estimate {key}")
    d = coef.d
    cb = c_bdg(bc.varrho)
    c0 = c_zero(horizon, eb["lam_dmu"], eb["lam_dsigma"], d, bc.varrho)
    lam = eb["lam_inv_ssT"]
    inner = 2.0 ** (r - 1.0) * (bc.M * math.sqrt(d)) ** r * (
        c0 + eb["mu_sup"] ** r * horizon ** (r / 2.0) * cb * c0 * lam ** (r / 2.0)
    )
    c1 = 2.0 * max(1.0, bc.M, inner)
    if lifetime != "truncated-power":
        return c1, math.inf
    p = drv.default_probs() if probs is None else np.asarray(probs, dtype=float)
    cabs = np.abs(drv.coeffs).astype(float)
    z = drv.zero_index()
    if z >= 0:
        cabs[:, z] += drv.source.sup
    ratio = 0.0
    for l in range(drv.card_L):
        cl = float(cabs[:, l].max())
        if cl > 0.0:
            if p[l] <= 0:
                raise ConfigurationError("p_l must be positive wherever c_l is nonzero")
            ratio = max(ratio, 3.0 * cl / p[l])
    c2 = cb * c0 * lam ** (r / 2.0) * drv.j_count * ratio ** (r - 1.0)
    return c1, c2


def h_prime_threshold(C1: float, C2: float, card_L: int) -> float:
    if card_L <= 1 or C2 == 0.0:
        return 1.0
    return min(1.0, C1 ** (-(card_L - 1)) / ((card_L + 1) * (card_L - 1) * C2))


def m_h_prime4(C1: float, C2: float, card_L: int, h: float) -> float:
    """``(M_h')**4 = (C1^{1-|L|} - h (|L|+1)(|L|-1) C2)^{1/(1-|L|)}``.

    For ``|L| = 1`` this is the limit ``C1 exp(2 h C2)``.
    """
    if card_L <= 1:
        expo = 2.0 * h * C2
        return C1 * math.exp(expo) if expo < 700.0 else math.inf
    base = C1 ** (1 - card_L) - h * (card_L + 1) * (card_L - 1) * C2
    if base <= 0:
        return math.inf
    return base ** (1.0 / (1 - card_L))


def compute_h_prime(C1: float, C2: float, card_L: int, safety: float = 0.9) -> tuple[float, float]:
    """``h_prime`` (safety factor times the strict threshold) and ``M_h_prime``."""
    if not C1 >= 1.0:
        raise ValueError("C1_hat must be at least 1")
    if not C2 >= 0.0:
        raise ValueError("C2_hat must be non-negative")
    if not math.isfinite(C2):
        raise InfeasibleBoundsError("C2_hat is infinite for this lifetime density")
    h = safety * h_prime_threshold(C1, C2, card_L)
    return h, m_h_prime4(C1, C2, card_L, h) ** 0.25


def solve_eta_ode(C1: float, C2: float, index_set, horizon: float, cap: float | None = None, steps: int = 1000):
    """RK4 for ``eta' = sum_l C2 eta^{|l|_1}``, ``eta(0) = C1``.

    Returns ``(t, eta)``. Raises when the solution blows up before ``horizon``
    or exceeds ``cap``.
    """
    if not C1 >= 1.0:
        raise ValueError("eta(0) = C1_hat must be at least 1")
    degs = np.asarray(index_set, dtype=int).reshape(len(index_set), -1).sum(axis=1).astype(float)

    def rhs(e):
        return float(C2 * np.sum(e ** degs))

    n = max(int(steps), 1000)
    h = horizon / n
    t = np.linspace(0.0, horizon, n + 1)
    eta = np.empty(n + 1)
    eta[0] = C1
    e = C1
    for k in range(n):
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(e)
            k2 = rhs(e + 0.5 * h * k1)
            k3 = rhs(e + 0.5 * h * k2)
            k4 = rhs(e + h * k3)
            e = e + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not math.isfinite(e) or e > 1e300:
            raise BoundViolationError(f"eta blew up at t = {t[k + 1]:.6g}")
        if cap is not None and e > cap * (1.0 + 1e-9):
            raise BoundViolationError(f"eta exceeded its cap {cap:.6g} at t = {t[k + 1]:.6g}")
        eta[k + 1] = e
    return t, eta


@dataclass
class BoundsReport:
    h_circ: float
    M_h_circ: float
    C1_hat: float
    C2_hat: float
    h_prime: float
    M_h_prime: float
    C_mu_sigma: float

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def bounds_report(
    coef: SdeCoefficients,
    drv: LocalPolynomialDriver,
    M: float,
    horizon: float,
    box,
    probs=None,
) -> BoundsReport:
    """Everything the ``bounds`` command prints; infeasible parts come back as nan."""
    cms = c_mu_sigma(coef, horizon, box)
    bc = BoundConstants(M, cms, lambda m: sup_f_circ(drv, m), card_L=drv.card_L)
    try:
        hc, mc = compute_h_circ(bc, 2.0 * horizon)
    except InfeasibleBoundsError:
        hc, mc = math.nan, math.nan
    c1, c2 = compute_C_hats(bc, coef, drv, horizon, box, "truncated-power", probs)
    hp, mp = compute_h_prime(c1, c2, drv.card_L)
    return BoundsReport(hc, mc, c1, c2, hp, mp, cms)
