"""Marked branching-diffusion estimator for one time interval.

Each sample grows a particle tree from ``(t, x)``. A particle draws its
lifetime first; survivors to the interval end contribute the terminal weight
``G``, the others draw an offspring index ``xi`` from ``p`` and contribute the
driver weight ``A``. Marked particles (mark ``q >= 1``) also carry a Malliavin
weight along direction ``b_q``. The sample ``U`` is the product of all
particle weights and ``V`` multiplies ``U`` by the root's Malliavin weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend
from ._kernel import (
    DOMAIN,
    EXPLODED,
    INTERP_LINEAR,
    INTERP_QUADRATIC,
    LIFE_EXPONENTIAL,
    LIFE_POWER,
    SINGULAR,
    SRC_CALLABLE,
    SRC_NONE,
    KernelInputs,
)
from .driver import LocalPolynomialDriver
from .errors import (
    CoefficientDomainError,
    ConfigurationError,
    EllipticityError,
    EstimatorError,
    ExplosionError,
)
from .grid import GridFunction
from .rng import stream_key
from .sde import SdeCoefficients

LIFETIMES = ("exponential", "truncated-power")


@dataclass
class BranchingConfig:
    lifetime: str = "exponential"
    rate: float = 0.4
    offspring_probs: np.ndarray | None = None
    max_particles: int = 1_000_000
    dt: float = 0.002
    mark_control_variate: bool = True
    v_control_variate: bool = True
    pilot: int = 1000
    variance_target: float = 0.000125
    sample_cap: int = 500_000
    batch: int = 50_000
    backend: str | None = None

    def __post_init__(self):
        if self.lifetime not in LIFETIMES:
            raise ConfigurationError(f"lifetime must be one of {LIFETIMES}")
        if self.lifetime == "exponential" and not self.rate > 0:
            raise ConfigurationError("exponential rate must be positive")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.pilot < 1 or self.sample_cap < 1:
            raise ConfigurationError("pilot and sample cap must be positive")
        if not self.variance_target > 0:
            raise ConfigurationError("variance target must be positive")

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        if self.lifetime == "exponential":
            return np.exp(-self.rate * t)
        return np.where(t >= 1.0, 0.0, 1.0 - np.cbrt(np.minimum(t, 1.0)))

    def density(self, t):
        t = np.asarray(t, dtype=float)
        if self.lifetime == "exponential":
            return self.rate * np.exp(-self.rate * t)
        return np.where((t > 0) & (t <= 1.0), t ** (-2.0 / 3.0) / 3.0, 0.0)

    def probs(self, drv: LocalPolynomialDriver) -> np.ndarray:
        if self.offspring_probs is None:
            return drv.default_probs()
        p = np.asarray(self.offspring_probs, dtype=float)
        if p.shape != (drv.card_L,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-9):
            raise ConfigurationError("offspring probabilities must be a distribution over L")
        needed = drv.coef_norms() > 0
        if np.any(needed & (p <= 0)):
            raise ConfigurationError("p_l must be positive wherever c_l is nonzero")
        return p


@dataclass
class Prior:
    """Previous iterate on the fine time grid: ``u`` and its gradient ``Du``."""

    t0: float
    dt: float
    u: list  # GridFunction per time
    du: list  # vector GridFunction (trailing axis d) per time

    def __post_init__(self):
        if len(self.u) != len(self.du) or not self.u:
            raise ConfigurationError("prior needs matching, non-empty u and Du grids")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.u))

    def covers(self, t0: float, t1: float) -> bool:
        tt = self.times
        tol = 0.5 * self.dt if len(tt) > 1 else 0.0
        return tt[0] - tol <= t0 + 1e-12 and tt[-1] + tol >= t1 - 1e-12


def planned_samples(theta: float, target: float, cap: int, pilot: int) -> int:
    """``min(cap, ceil((theta / target)**2))``, never below the pilot size."""
    if not math.isfinite(theta):
        return int(cap)
    return int(min(cap, max(pilot, math.ceil((theta / target) ** 2))))


@dataclass
class EstimateResult:
    u: float
    v: np.ndarray
    u_std: float
    n_used: int
    u_se: float
    v_se: np.ndarray
    max_tree: int


def _same_grid(a: GridFunction, b: GridFunction) -> bool:
    return a.shape == b.shape and np.allclose(a.lo, b.lo) and np.allclose(a.step, b.step)


def pack_inputs(
    cfg: BranchingConfig,
    coef: SdeCoefficients,
    drv: LocalPolynomialDriver,
    terminal: GridFunction,
    prior: Prior,
) -> KernelInputs:
    d = coef.d
    if drv.d != d or terminal.d != d:
        raise ConfigurationError("dimension mismatch between SDE, driver and grids")
    for g in list(prior.u) + list(prior.du):
        if not _same_grid(g, terminal):
            raise ConfigurationError("prior grids must share the terminal grid")
    p = cfg.probs(drv)
    pcum = np.cumsum(p)
    pcum[-1] = 1.0
    ke = drv.kernels
    eoff = np.cumsum([0] + [len(e) for e in ke.edges[:-1]]).astype(np.intc)
    hoff = np.cumsum([0] + [len(h) for h in ke.halfwidths[:-1]]).astype(np.intc)
    nn = terminal.size
    pu = np.stack([g.values.reshape(nn) for g in prior.u])
    pz = np.stack([g.values.reshape(nn, d) for g in prior.du])
    src = drv.source
    zero = drv.zero_index()
    if src.kind != SRC_NONE and zero < 0:
        raise ConfigurationError("a source term needs the zero multi-index in L")
    return KernelInputs(
        d=d,
        dt=float(cfg.dt),
        sde_kind=int(coef.kind),
        sde_par=np.asarray(coef.params, dtype=float),
        life_kind=LIFE_EXPONENTIAL if cfg.lifetime == "exponential" else LIFE_POWER,
        rate=float(cfg.rate),
        nL=drv.card_L,
        qp1=drv.q_count + 1,
        L=drv.index_set.astype(np.intc),
        p=p,
        pcum=pcum,
        zero_index=zero,
        nb=drv.q_count,
        basis=drv.basis,
        naxes=ke.naxes,
        kn_ncell=np.asarray(ke.ncell, dtype=np.intc),
        kn_edges=np.concatenate(ke.edges),
        kn_eoff=eoff,
        kn_hw=np.concatenate(ke.halfwidths) if any(len(h) for h in ke.halfwidths) else np.zeros(0),
        kn_hoff=hoff,
        kn_stride=ke.strides(),
        coef=np.ascontiguousarray(drv.coeffs),
        src_kind=int(src.kind),
        src_par=np.asarray(src.params, dtype=float),
        grid_lo=terminal.lo,
        grid_step=terminal.step,
        grid_n=np.asarray(terminal.shape, dtype=np.intc),
        grid_stride=terminal.strides(),
        nn=nn,
        interp_kind=INTERP_LINEAR if terminal.interp == "linear" else INTERP_QUADRATIC,
        term=terminal.values.reshape(nn),
        nT=len(prior.u),
        pt0=float(prior.t0),
        pdt=float(prior.dt),
        pu=pu,
        pz=pz,
        mark_cv=int(cfg.mark_control_variate),
        v_cv=int(cfg.v_control_variate),
        max_particles=int(cfg.max_particles),
        sde_obj=coef,
        src_fn=src.fn if src.kind == SRC_CALLABLE else None,
        basis_fn=drv.basis_fn,
    )


class IntervalEstimator:
    """Samples ``(U, V)`` from ``(t_start, x)`` over ``[t_start, t_end]``."""

    def __init__(
        self,
        cfg: BranchingConfig,
        coef: SdeCoefficients,
        drv: LocalPolynomialDriver,
        terminal: GridFunction,
        prior: Prior,
        t_start: float,
        t_end: float,
        length: float | None = None,
    ):
        # ``length`` overrides ``t_end - t_start`` for intervals below float resolution
        length = float(t_end - t_start) if length is None else float(length)
        if not length > 0.0:
            raise ValueError("interval must have positive length")
        if cfg.lifetime == "truncated-power" and not length < 1.0:
            raise ConfigurationError("truncated-power lifetimes need intervals shorter than 1")
        if not prior.covers(t_start, t_end):
            raise ConfigurationError(
                f"prior grid [{prior.times[0]}, {prior.times[-1]}] misses [{t_start}, {t_end}]"
            )
        self.cfg = cfg
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self._length = length
        self.inputs = pack_inputs(cfg, coef, drv, terminal, prior)
        self.kernel = backend.kernel_for(self.inputs, cfg.backend)

    @property
    def length(self) -> float:
        return self._length

    def samples(self, x, key, start: int, count: int, compute_v: bool = True):
        u, v, status, largest = self.kernel.run(
            np.asarray(x, dtype=float), self.t_start, self.length, key[0], key[1],
            int(start), int(count), bool(compute_v),
        )
        if status == EXPLODED:
            raise ExplosionError(
                f"tree exceeded {self.cfg.max_particles} particles at x={np.ravel(x)}"
            )
        if status == DOMAIN:
            raise CoefficientDomainError(f"non-finite coefficients on a path from x={np.ravel(x)}")
        if status == SINGULAR:
            raise EllipticityError(f"singular diffusion on a path from x={np.ravel(x)}")
        return u, v, largest

    def record(self, x, key, index: int = 0, compute_v: bool = True):
        """Grow one tree with the pure-Python core and return its particles."""
        from ._pycore import Kernel as PyKernel

        k = PyKernel(self.inputs)
        return k.record(np.asarray(x, dtype=float), self.t_start, self.length, key[0], key[1], index, compute_v)

    def estimate(self, x, key, compute_v: bool = True, target=None, cap=None) -> EstimateResult:
        """Pilot batch, then top up to ``min(cap, ceil((theta/target)^2))`` samples."""
        cfg = self.cfg
        target = cfg.variance_target if target is None else float(target)
        cap = cfg.sample_cap if cap is None else int(cap)
        n0 = min(cfg.pilot, cap)
        u, v, largest = self.samples(x, key, 0, n0, compute_v)
        theta = float(np.std(u, ddof=1)) if n0 > 1 else 0.0
        want = planned_samples(theta, target, cap, n0)
        us, vs = [u], [v]
        done = n0
        while done < want:
            m = min(cfg.batch, want - done)
            ub, vb, lb = self.samples(x, key, done, m, compute_v)
            us.append(ub)
            vs.append(vb)
            largest = max(largest, lb)
            done += m
        u = np.concatenate(us)
        v = np.concatenate(vs)
        bad = ~np.isfinite(u)
        if compute_v:
            bad |= ~np.all(np.isfinite(v), axis=1)
        if bad.all():
            raise EstimatorError(f"all {len(u)} samples are non-finite at x={np.ravel(x)}")
        if bad.any():
            raise EstimatorError(f"{int(bad.sum())} non-finite samples at x={np.ravel(x)}")
        n = len(u)
        u_std = float(np.std(u, ddof=1)) if n > 1 else 0.0
        v_se = np.std(v, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(v.shape[1])
        return EstimateResult(
            u=float(np.mean(u)),
            v=np.mean(v, axis=0),
            u_std=u_std,
            n_used=n,
            u_se=u_std / math.sqrt(n),
            v_se=v_se,
            max_tree=int(largest),
        )


def constant_prior(terminal: GridFunction, t0: float, t1: float, dt: float) -> Prior:
    """Prior equal to the terminal grid (and zero gradient) at every time."""
    n = max(1, int(round((t1 - t0) / dt))) + 1
    du = terminal.with_values(np.zeros(terminal.shape + (terminal.d,)))
    return Prior(t0, dt, [terminal] * n, [du] * n)


def sample_estimate(
    cfg, coef, drv, t, x, interval_end, terminal, prior, rng_key, index=0
) -> tuple[float, np.ndarray]:
    """One ``(U, V)`` draw from the stream ``(rng_key, index)``."""
    est = IntervalEstimator(cfg, coef, drv, terminal, prior, t, interval_end)
    u, v, _ = est.samples(x, rng_key, index, 1, True)
    return float(u[0]), v[0]


def estimate_u_v(
    cfg, coef, drv, t, x, interval_end, terminal, prior, rng_key,
    variance_target=None, sample_cap=None, compute_v=True,
) -> EstimateResult:
    est = IntervalEstimator(cfg, coef, drv, terminal, prior, t, interval_end)
    return est.estimate(x, rng_key, compute_v, variance_target, sample_cap)


def grow_tree(cfg, coef, drv, t, x, interval_end, terminal, prior, seed, index=0):
    """Recorded particle tree for inspection: ``(status, u, v, size, particles)``."""
    est = IntervalEstimator(cfg, coef, drv, terminal, prior, t, interval_end)
    return est.record(x, stream_key(seed), index)


@dataclass
class Diagnostics:
    rows: list = field(default_factory=list)

    def add(self, iteration, t, x, res: EstimateResult) -> None:
        self.rows.append(
            [iteration, t] + [float(c) for c in np.ravel(x)] + [res.n_used, res.u_std, res.u, res.max_tree]
        )

    def to_csv(self, path, d: int) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "t"] + [f"x{a + 1}" for a in range(d)] + ["n_used", "theta", "estimate", "max_tree"])
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
