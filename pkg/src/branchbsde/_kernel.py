"""Flat, array-only description of one interval's sampling problem.

Both backends consume the same :class:`KernelInputs`. Coefficient families
with a registered ``kind`` are evaluated from ``*_par`` arrays; ``kind = -1``
means a Python callable is attached and only the pure-Python backend applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

SDE_AFFINE = 0
SDE_CLAMP1D = 1
SDE_CALLABLE = -1

SRC_NONE = 0
SRC_PAPER = 1
SRC_CALLABLE = -1

LIFE_EXPONENTIAL = 0
LIFE_POWER = 1

INTERP_QUADRATIC = 0
INTERP_LINEAR = 1

# status codes returned by both backends
OK = 0
EXPLODED = 1
DOMAIN = 2
SINGULAR = 3


@dataclass
class KernelInputs:
    d: int
    dt: float
    sde_kind: int
    sde_par: np.ndarray
    life_kind: int
    rate: float
    nL: int
    qp1: int
    L: np.ndarray  # (nL, q+1) int
    p: np.ndarray
    pcum: np.ndarray
    zero_index: int
    nb: int
    basis: np.ndarray  # (q, d)
    naxes: int
    kn_ncell: np.ndarray
    kn_edges: np.ndarray
    kn_eoff: np.ndarray
    kn_hw: np.ndarray
    kn_hoff: np.ndarray
    kn_stride: np.ndarray
    coef: np.ndarray  # (ncells, nL)
    src_kind: int
    src_par: np.ndarray
    grid_lo: np.ndarray
    grid_step: np.ndarray
    grid_n: np.ndarray
    grid_stride: np.ndarray
    nn: int
    interp_kind: int
    term: np.ndarray  # (nn,)
    nT: int
    pt0: float
    pdt: float
    pu: np.ndarray  # (nT, nn)
    pz: np.ndarray  # (nT, nn, d), gradient Du of the prior
    mark_cv: int = 1
    v_cv: int = 1
    max_particles: int = 1_000_000
    sde_obj: Any = None
    src_fn: Callable[[float, np.ndarray], float] | None = None
    basis_fn: Callable[[np.ndarray], np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def compiled_ok(self) -> bool:
        return (
            self.sde_kind >= 0
            and self.src_kind >= 0
            and self.basis_fn is None
            and self.d <= 3
        )
