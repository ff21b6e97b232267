"""Built-in problems.

Coefficients need derivatives and bounds, so problems are registered in code
rather than parsed from expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernel import SRC_PAPER
from .driver import (
    LocalPolynomialDriver,
    Source,
    TensorKernels,
    constant_driver,
    fit_from_driver,
    linear_driver,
    paper_source,
    zero_driver,
)
from .errors import ConfigurationError
from .sde import SdeCoefficients, paper_coefficients


@dataclass
class Problem:
    name: str
    d: int
    horizon: float
    coef: SdeCoefficients
    terminal: Callable[[np.ndarray], np.ndarray]  # (n, d) -> (n,)
    build_driver: Callable[..., LocalPolynomialDriver]  # (n_y, n_z, blend, sim_box)
    analytic: Callable[[float, np.ndarray], np.ndarray] | None = None
    box: list = field(default_factory=lambda: [[-1.0, 1.0]])
    M: float = 1.0
    fhat: Callable | None = None
    fit_box: list | None = None


def paper_fhat(y, z):
    return 1.0 / (2.0 * (1.0 + abs(y * z)))


def paper_terminal(x):
    x = np.asarray(x, dtype=float)
    return (1.0 + np.cos(x[..., 0])) / 2.0


def paper_exact(t, x, horizon=1.0):
    x = np.asarray(x, dtype=float)
    return (1.0 + np.cos(x[..., 0])) / 2.0 * np.exp((t - horizon) / 2.0)


def _paper_problem() -> Problem:
    coef = paper_coefficients()
    T = 1.0
    src_par = np.concatenate([[T], coef.params])
    fit_box = [[0.0, 1.0], [-1.0, 1.0]]

    def build(n_y=20, n_z=10, blend=0.2, sim_box=((-2.0, 2.0),)):
        drv = fit_from_driver(paper_fhat, fit_box, n_y, n_z, blend)
        lo, hi = np.asarray(sim_box, dtype=float)[0]
        ts, xs = np.meshgrid(np.linspace(0.0, T, 201), np.linspace(lo, hi, 2001), indexing="ij")
        sup = float(np.abs(paper_source(src_par, ts, xs)).max()) * 1.01
        drv.source = Source(SRC_PAPER, src_par, None, sup)
        return drv

    return Problem(
        name="paper-example",
        d=1,
        horizon=T,
        coef=coef,
        terminal=paper_terminal,
        build_driver=build,
        analytic=lambda t, x: paper_exact(t, x, T),
        M=1.0,
        fhat=paper_fhat,
        fit_box=fit_box,
    )


def _zero_problem() -> Problem:
    return Problem(
        name="zero-driver",
        d=1,
        horizon=1.0,
        coef=paper_coefficients(),
        terminal=paper_terminal,
        build_driver=lambda *a, **k: zero_driver(1),
    )


def _constant_problem(c0: float = 0.25) -> Problem:
    g0 = 0.5

    return Problem(
        name="constant-driver",
        d=1,
        horizon=1.0,
        coef=paper_coefficients(),
        terminal=lambda x: np.full(np.asarray(x).shape[:-1], g0),
        build_driver=lambda *a, **k: constant_driver(c0, 1),
        analytic=lambda t, x: np.full(np.asarray(x).shape[:-1], g0 + c0 * (1.0 - t)),
        M=2.0,
    )


def _ou_linear_problem(c: float = 0.3) -> Problem:
    """``f = c y`` with OU dynamics: ``u = e^{c(T-t)} E[cos X_T]`` in closed form."""
    coef = SdeCoefficients.affine([[-1.0]], [0.0], [[0.3]])
    T = 1.0

    def exact(t, x):
        tau = T - t
        x = np.asarray(x, dtype=float)[..., 0]
        m = x * math.exp(-tau)
        v = 0.09 * (1.0 - math.exp(-2.0 * tau)) / 2.0
        return math.exp(c * tau) * np.cos(m) * math.exp(-v / 2.0) * 0.5

    return Problem(
        name="linear-ou",
        d=1,
        horizon=T,
        coef=coef,
        terminal=lambda x: 0.5 * np.cos(np.asarray(x, dtype=float)[..., 0]),
        build_driver=lambda *a, **k: linear_driver(c, 1),
        analytic=exact,
        M=1.0,
    )


def _switching_problem() -> Problem:
    """``f = c(y') y`` with a two-cell kernel on the prior: Picard genuinely iterates."""
    coef = paper_coefficients()

    def build(*a, **k):
        kern = TensorKernels([[-1.0, 0.6, 1.0], [-1.0, 1.0]], blend=0.5)
        return LocalPolynomialDriver([[1, 0]], [[0.2], [0.8]], [[1.0]], kern, 1)

    return Problem(
        name="switching-linear",
        d=1,
        horizon=1.0,
        coef=coef,
        terminal=paper_terminal,
        build_driver=build,
        M=2.0,
    )


REGISTRY: dict[str, Callable[[], Problem]] = {
    "paper-example": _paper_problem,
    "zero-driver": _zero_problem,
    "constant-driver": _constant_problem,
    "linear-ou": _ou_linear_problem,
    "switching-linear": _switching_problem,
}


def get_problem(name: str) -> Problem:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise ConfigurationError(f"unknown problem {name!r}; choose from {sorted(REGISTRY)}") from None
