"""Backward time stepping with face-lift truncation and outer Picard iterations.

For every Picard iteration ``m`` the sweep goes from ``t_{N-1}`` down to
``t_0``; on each interval every spatial node is estimated independently by the
branching estimator with the already lifted grid at ``t_{i+1}`` as terminal
condition, and the new grid is face-lifted. Priors (value and gradient) are
read from the previous iteration on the same time grid, at the nearest grid
time.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bounds import BoundConstants, c_mu_sigma, compute_C_hats, compute_h_circ, compute_h_prime
from .branching import BranchingConfig, Diagnostics, IntervalEstimator, Prior
from .driver import LocalPolynomialDriver, sup_f_circ
from .errors import (
    BranchBSDEError,
    ConfigurationError,
    InfeasibleBoundsError,
    PriorError,
)
from .grid import GridFunction, facelift, finite_difference_gradient, lipschitz_defect
from .problems import Problem
from .rng import stream_key
from .sde import SdeCoefficients

log = logging.getLogger(__name__)

GATE_MODES = ("error", "warn", "off")
GRADIENT_MODES = ("fd", "malliavin")


@dataclass
class SolverConfig:
    steps: int = 20
    dx: float = 0.1
    dt: float = 0.002
    n_y: int = 20
    n_z: int = 10
    blend: float = 0.2
    lifetime: str = "exponential"
    rate: float = 0.4
    M: float | None = None
    variance_target: float = 0.000125
    sample_cap: int = 500_000
    pilot: int = 1000
    m_max: int = 1
    tol: float = 0.0
    seed: int = 0
    gradient_mode: str = "fd"
    facelift: bool = True
    threads: int = 1
    box: list | None = None
    sim_box: list | None = None
    bounds_gate: str = "error"
    max_particles: int = 1_000_000
    interp: str = "modified-quadratic"
    backend: str | None = None

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigurationError("steps (N_h) must be at least 1")
        for name in ("dx", "dt", "variance_target", "rate"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_y < 1 or self.n_z < 1:
            raise ConfigurationError("mesh counts must be at least 1")
        if self.m_max < 1:
            raise ConfigurationError("m_max must be at least 1")
        if self.sample_cap < 1 or self.pilot < 2:
            raise ConfigurationError("sample cap must be positive and the pilot at least 2")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigurationError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.bounds_gate not in GATE_MODES:
            raise ConfigurationError(f"bounds_gate must be one of {GATE_MODES}")
        if self.threads < 1:
            raise ConfigurationError("threads must be at least 1")
        if self.M is not None and not self.M > 0:
            raise ConfigurationError("M must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("N_h must be at least 1")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def points(self) -> np.ndarray:
        return self.h * np.arange(self.steps + 1)


@dataclass
class PicardState:
    grid: TimeGrid
    coef: SdeCoefficients
    driver: LocalPolynomialDriver
    branching: BranchingConfig
    config: SolverConfig
    M: float
    iteration: int = 0
    u_grids: list = field(default_factory=list)
    v_grids: list = field(default_factory=list)  # v = Du sigma
    du_grids: list = field(default_factory=list)
    u_se: list = field(default_factory=list)
    v_se: list = field(default_factory=list)
    prior: Prior | None = None
    deltas: list = field(default_factory=list)
    gate: dict = field(default_factory=dict)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    timings: list = field(default_factory=list)
    n_used: list = field(default_factory=list)


def simulation_box(problem: Problem, cfg: SolverConfig) -> np.ndarray:
    """Report box padded by ``4 sigma_sup sqrt(T)``, aligned to the ``dx`` lattice."""
    box = np.asarray(cfg.box if cfg.box is not None else problem.box, dtype=float).reshape(-1, 2)
    if cfg.sim_box is not None:
        return np.asarray(cfg.sim_box, dtype=float).reshape(-1, 2)
    sig = problem.coef.sup_norms(box)["sigma"]
    k = math.ceil(4.0 * sig * math.sqrt(problem.horizon) / cfg.dx - 1e-9)
    return np.stack([box[:, 0] - k * cfg.dx, box[:, 1] + k * cfg.dx], axis=1)


def sigma_at_nodes(coef: SdeCoefficients, g: GridFunction) -> np.ndarray:
    return coef.sigma(g.nodes()).reshape(g.shape + (coef.d, coef.d))


def du_to_v(coef, du: GridFunction) -> GridFunction:
    sig = sigma_at_nodes(coef, du)
    return du.with_values(np.einsum("...k,...kj->...j", du.values, sig))


def v_to_du(coef, v: GridFunction) -> GridFunction:
    sig = sigma_at_nodes(coef, v)
    return v.with_values(np.einsum("...j,...jk->...k", v.values, np.linalg.inv(sig)))


def initial_prior(g: GridFunction, coef: SdeCoefficients, M: float, n_times: int = 1):
    """``(g, FD(g) sigma)`` repeated on ``n_times`` grid times; g must satisfy the bounds."""
    tol = 1e-12 * max(1.0, M)
    if np.abs(g.values).max() > M + tol:
        raise PriorError(f"terminal condition exceeds M = {M}; face-lift it first")
    if lipschitz_defect(g, M) > tol:
        raise PriorError(f"terminal condition is not {M}-Lipschitz on the grid; face-lift it first")
    du = finite_difference_gradient(g)
    v = du_to_v(coef, du)
    return [g] * n_times, [v] * n_times


def _gate(problem: Problem, cfg: SolverConfig, coef, drv, M, h, sim_box) -> dict:
    info: dict = {"h": h}
    if cfg.bounds_gate == "off":
        return info
    messages = []
    cms = c_mu_sigma(coef, problem.horizon, sim_box)
    bc = BoundConstants(M, cms, lambda m: sup_f_circ(drv, m), card_L=drv.card_L)
    try:
        hc, mc = compute_h_circ(bc, 2.0 * problem.horizon)
        info.update(h_circ=hc, M_h_circ=mc)
        if not h < hc:
            messages.append(f"step h = {h:.6g} violates h < h_circ = {hc:.6g} (M_h_circ = {mc:.6g})")
    except InfeasibleBoundsError as exc:
        messages.append(f"h_circ infeasible: {exc}")
    if cfg.lifetime == "truncated-power":
        c1, c2 = compute_C_hats(bc, coef, drv, problem.horizon, sim_box)
        hp, mp = compute_h_prime(c1, c2, drv.card_L)
        info.update(h_prime=hp, M_h_prime=mp)
        if not h < hp:
            messages.append(f"step h = {h:.6g} violates h < h_prime = {hp:.6g}")
    info["violations"] = messages
    if messages:
        text = "; ".join(messages)
        if cfg.bounds_gate == "error":
            raise ConfigurationError(text)
        warnings.warn(text, RuntimeWarning, stacklevel=3)
    return info


def setup(problem: Problem, cfg: SolverConfig) -> PicardState:
    """Fit the driver, check the bounds gate and build the iteration-0 state."""
    cfg.validate()
    M = float(cfg.M if cfg.M is not None else problem.M)
    sim_box = simulation_box(problem, cfg)
    tg = TimeGrid(problem.horizon, cfg.steps)
    drv = problem.build_driver(cfg.n_y, cfg.n_z, cfg.blend, sim_box)
    gate = _gate(problem, cfg, problem.coef, drv, M, tg.h, sim_box)
    g = GridFunction.sample(problem.terminal, sim_box, cfg.dx, interp=cfg.interp)
    u0, v0 = initial_prior(g, problem.coef, M, tg.steps + 1)
    du0 = [finite_difference_gradient(g)] * (tg.steps + 1)
    bcfg = BranchingConfig(
        lifetime=cfg.lifetime,
        rate=cfg.rate,
        max_particles=cfg.max_particles,
        dt=cfg.dt,
        pilot=cfg.pilot,
        variance_target=cfg.variance_target,
        sample_cap=cfg.sample_cap,
        backend=cfg.backend,
    )
    state = PicardState(tg, problem.coef, drv, bcfg, cfg, M, gate=gate)
    state.u_grids, state.v_grids, state.du_grids = list(u0), list(v0), list(du0)
    zero = g.with_values(np.zeros(g.shape))
    state.u_se = [zero] * (tg.steps + 1)
    state.v_se = [g.with_values(np.zeros(g.shape + (g.d,)))] * (tg.steps + 1)
    return state


def solve_interval(state: PicardState, i: int, prior: Prior):
    """Estimate every node at ``t_i`` with terminal ``u(t_{i+1})``; returns new grids."""
    cfg = state.config
    tg = state.grid
    terminal = state.u_grids[i + 1]
    est = IntervalEstimator(
        state.branching, state.coef, state.driver, terminal, prior, tg.points[i], tg.points[i + 1]
    )
    nodes = terminal.nodes()
    compute_v = cfg.gradient_mode == "malliavin"
    m = state.iteration

    def one(n):
        try:
            return est.estimate(nodes[n], stream_key(cfg.seed, m, i, n), compute_v)
        except BranchBSDEError as exc:
            raise type(exc)(f"{exc} (iteration {m}, interval {i}, node {nodes[n]})") from exc

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, range(len(nodes))))
    else:
        results = [one(n) for n in range(len(nodes))]

    shape = terminal.shape
    d = terminal.d
    raw = np.array([r.u for r in results]).reshape(shape)
    se = np.array([r.u_se for r in results]).reshape(shape)
    for n, r in enumerate(results):
        state.diagnostics.add(m, float(tg.points[i]), nodes[n], r)
    state.n_used.append(int(sum(r.n_used for r in results)))
    u = terminal.with_values(raw)
    if cfg.facelift:
        u = facelift(u, state.M)
    if compute_v:
        dv = np.array([r.v for r in results]).reshape(shape + (d,))
        du = terminal.with_values(dv)
        vse = terminal.with_values(np.array([r.v_se for r in results]).reshape(shape + (d,)))
        v = du_to_v(state.coef, du)
        sig = sigma_at_nodes(state.coef, du)
        vse = vse.with_values(np.sqrt(np.einsum("...k,...kj->...j", vse.values ** 2, sig ** 2)))
    else:
        du = finite_difference_gradient(u)
        v = du_to_v(state.coef, du)
        vse = v.with_values(np.zeros(v.values.shape))
    return u, v, du, u.with_values(se), vse


def run(problem: Problem, cfg: SolverConfig, state: PicardState | None = None) -> PicardState:
    """Picard iterations until ``m_max`` or the sup-norm delta drops below ``tol``."""
    state = setup(problem, cfg) if state is None else state
    tg = state.grid
    for m in range(1, cfg.m_max + 1):
        state.iteration = m
        prior = Prior(0.0, tg.h, list(state.u_grids), list(state.du_grids))
        previous = [g.values for g in state.u_grids]
        t0 = time.perf_counter()
        for i in range(tg.steps - 1, -1, -1):
            u, v, du, use, vse = solve_interval(state, i, prior)
            state.u_grids[i], state.v_grids[i], state.du_grids[i] = u, v, du
            state.u_se[i], state.v_se[i] = use, vse
            log.info("iteration %d interval %d done", m, i)
        state.timings.append(time.perf_counter() - t0)
        state.prior = prior
        delta = max(float(np.abs(g.values - p).max()) for g, p in zip(state.u_grids, previous))
        state.deltas.append(delta)
        log.info("iteration %d: sup-norm delta %.3e", m, delta)
        if cfg.tol > 0 and delta < cfg.tol:
            break
    return state


@dataclass
class ErrorTable:
    rows: list  # (t, x..., estimate, exact, abs_err)
    d: int

    @property
    def errors(self) -> np.ndarray:
        return np.array([r[-1] for r in self.rows])

    @property
    def max_error(self) -> float:
        return float(self.errors.max())

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean())

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{a + 1}" for a in range(self.d)] + ["u_est", "u_exact", "abs_err"])
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])


def report_mask(g: GridFunction, box) -> np.ndarray:
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    nodes = g.nodes()
    tol = 1e-9 * g.step.max()
    return np.all((nodes >= box[:, 0] - tol) & (nodes <= box[:, 1] + tol), axis=1)


def error_report(state: PicardState, analytic, box=None, all_times: bool = False) -> ErrorTable:
    """Absolute errors against ``analytic(t, x)`` at the report-box nodes."""
    cfg = state.config
    tg = state.grid
    rows = []
    indices = range(tg.steps + 1) if all_times else [0]
    for i in indices:
        g = state.u_grids[i]
        mask = report_mask(g, box if box is not None else (cfg.box or [[-1.0, 1.0]]))
        nodes = g.nodes()[mask]
        est = g.flat()[mask]
        exact = np.asarray(analytic(float(tg.points[i]), nodes), dtype=float).reshape(-1)
        for x, e, a in zip(nodes, est, exact):
            rows.append([float(tg.points[i])] + list(map(float, x)) + [float(e), float(a), abs(float(e) - float(a))])
    return ErrorTable(rows, g.d)


def solution_table(state: PicardState, box=None, analytic=None) -> list:
    """Rows ``(x..., u_est[, u_exact, abs_err])`` at ``t = 0`` over the report box."""
    g = state.u_grids[0]
    mask = report_mask(g, box if box is not None else (state.config.box or [[-1.0, 1.0]]))
    nodes = g.nodes()[mask]
    est = g.flat()[mask]
    rows = []
    exact = None if analytic is None else np.asarray(analytic(0.0, nodes), dtype=float).reshape(-1)
    for k, (x, e) in enumerate(zip(nodes, est)):
        row = list(map(float, x)) + [float(e)]
        if exact is not None:
            row += [float(exact[k]), abs(float(e) - float(exact[k]))]
        rows.append(row)
    return rows
