"""Command-line interface.

Subcommands: ``solve``, ``sweep``, ``bounds``, ``fit-driver``. Configuration is
a JSON object with a ``problem`` name and solver settings at top level; sweeps
add ``"sweep": {"axis": "nh" | "dx" | "mesh", "values": [...]}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, backend
from .bounds import bounds_report
from .driver import eval_f_bar, fit_from_driver
from .errors import BranchBSDEError, ConfigurationError
from .picard import SolverConfig, error_report, run, simulation_box, solution_table
from .problems import get_problem
from .sde import simulate_endpoints

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

RESERVED = {"problem", "sweep", "results", "oracle_paths", "version", "backend_used"}


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    data = json.loads(p.read_text())
    if not isinstance(data, dict) or "problem" not in data:
        raise ConfigurationError("config must be a JSON object with a 'problem' entry")
    return data


def solver_config(data: dict, args) -> SolverConfig:
    fields = {k: v for k, v in data.items() if k not in RESERVED}
    cfg = SolverConfig.from_dict(fields)
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    if getattr(args, "threads", None) is not None:
        cfg.threads = int(args.threads)
    if getattr(args, "no_facelift", False):
        cfg.facelift = False
    if getattr(args, "gradient", None) is not None:
        cfg.gradient_mode = args.gradient
    cfg.validate()
    return cfg


def manifest(problem_name: str, cfg: SolverConfig, results: dict | None = None) -> dict:
    out = {"problem": problem_name}
    out.update(cfg.to_dict())
    out["version"] = __version__
    out["backend_used"] = backend.NAME
    if results is not None:
        out["results"] = results
    return out


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _solve_once(problem, cfg):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        state = run(problem, cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return state


def cmd_solve(args) -> int:
    data = load_config(args.config)
    problem = get_problem(data["problem"])
    cfg = solver_config(data, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state = _solve_once(problem, cfg)
    wall = time.perf_counter() - t0
    d = problem.d
    rows = solution_table(state, analytic=problem.analytic)
    header = [f"x{a + 1}" for a in range(d)] + ["u_est"]
    if problem.analytic is not None:
        header += ["u_exact", "abs_err"]
    _write_rows(out / "solution.csv", header, rows)
    v0 = state.v_grids[0]
    _write_rows(
        out / "gradient.csv",
        [f"x{a + 1}" for a in range(d)] + [f"v{a + 1}" for a in range(d)],
        [list(x) + list(v) for x, v in zip(v0.nodes(), v0.flat().reshape(v0.size, -1))],
    )
    _write_rows(out / "picard.csv", ["iteration", "delta"], [[m + 1, dl] for m, dl in enumerate(state.deltas)])
    state.diagnostics.to_csv(out / "diagnostics.csv", d)
    results = {"iterations": state.iteration, "deltas": state.deltas, "gate": _jsonable(state.gate)}
    if problem.analytic is not None:
        er = error_report(state, problem.analytic)
        results.update(max_error=er.max_error, mean_error=er.mean_error)
        print(f"max_error = {er.max_error:.6g}")
        print(f"mean_error = {er.mean_error:.6g}")
    (out / "manifest.json").write_text(json.dumps(manifest(problem.name, cfg, results), indent=1, sort_keys=True))
    print(f"wall_time = {wall:.3f}")
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _apply_axis(cfg: SolverConfig, axis: str, value) -> SolverConfig:
    data = cfg.to_dict()
    if axis == "nh":
        data["steps"] = int(value)
    elif axis == "dx":
        data["dx"] = float(value)
    elif axis == "mesh":
        data["n_y"], data["n_z"] = int(value[0]), int(value[1])
    else:
        raise ConfigurationError("sweep axis must be nh, dx or mesh")
    return SolverConfig.from_dict(data)


def cmd_sweep(args) -> int:
    data = load_config(args.config)
    problem = get_problem(data["problem"])
    if problem.analytic is None:
        raise ConfigurationError("sweeps report errors and need a problem with an analytic solution")
    base = solver_config(data, args)
    sweep = data.get("sweep") or {}
    axis = args.axis or sweep.get("axis")
    values = sweep.get("values")
    if axis not in ("nh", "dx", "mesh") or not values:
        raise ConfigurationError("sweep needs an axis (nh|dx|mesh) and a list of values")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = _apply_axis(base, axis, value)
        label = "x".join(map(str, value)) if axis == "mesh" else str(value)
        t0 = time.perf_counter()
        try:
            state = _solve_once(problem, cfg)
            er = error_report(state, problem.analytic)
            rows.append([label, er.max_error, er.mean_error, time.perf_counter() - t0, ""])
        except BranchBSDEError as exc:
            rows.append([label, math.nan, math.nan, time.perf_counter() - t0, str(exc)])
        print(",".join(map(str, rows[-1])))
    _write_rows(out / "sweep.csv", [axis, "max_error", "mean_error", "wall_time", "error"], rows)
    (out / "manifest.json").write_text(
        json.dumps(dict(manifest(problem.name, base), sweep={"axis": axis, "values": values}), indent=1, sort_keys=True)
    )
    return 0


def cmd_bounds(args) -> int:
    data = load_config(args.config)
    problem = get_problem(data["problem"])
    cfg = solver_config(data, args)
    sim_box = simulation_box(problem, cfg)
    drv = problem.build_driver(cfg.n_y, cfg.n_z, cfg.blend, sim_box)
    M = cfg.M if cfg.M is not None else problem.M
    rep = bounds_report(problem.coef, drv, M, problem.horizon, sim_box)
    for k, v in rep.as_dict().items():
        print(f"{k} = {v:.6g}")
    print(f"h = {problem.horizon / cfg.steps:.6g}")
    return 0


def cmd_fit_driver(args) -> int:
    data = load_config(args.config)
    problem = get_problem(data["problem"])
    if problem.fhat is None:
        raise ConfigurationError(f"problem {problem.name!r} has no spline-fitted driver")
    cfg = solver_config(data, args)
    drv = fit_from_driver(problem.fhat, problem.fit_box, cfg.n_y, cfg.n_z, cfg.blend)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    drv.save(out / "driver.json")
    box = np.asarray(problem.fit_box)
    ys, zs = np.meshgrid(np.linspace(*box[0], 201), np.linspace(*box[1], 201), indexing="ij")
    approx = eval_f_bar(drv, np.zeros(ys.shape + (1,)), ys, zs[..., None])
    exact = np.vectorize(problem.fhat)(ys, zs)
    print(f"cells = {drv.j_count}")
    print(f"max_fit_error = {float(np.abs(approx - exact).max()):.6g}")
    return 0


def cmd_oracle(args) -> int:
    """Plain nested Monte Carlo of E[g(X_T)] at the report nodes (zero driver)."""
    data = load_config(args.config)
    problem = get_problem(data["problem"])
    cfg = solver_config(data, args)
    n_paths = int(data.get("oracle_paths", 100_000))
    box = np.asarray(cfg.box or problem.box, dtype=float)
    axes = [np.arange(lo, hi + cfg.dx / 2, cfg.dx) for lo, hi in box]
    nodes = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    rng = np.random.default_rng(cfg.seed)
    xt = simulate_endpoints(problem.coef, nodes, problem.horizon, cfg.dt, n_paths, rng)
    vals = problem.terminal(xt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [list(x) + [m, s] for x, m, s in zip(nodes, vals.mean(axis=1), vals.std(axis=1, ddof=1) / math.sqrt(n_paths))]
    _write_rows(out / "oracle.csv", [f"x{a + 1}" for a in range(problem.d)] + ["mean", "se"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchbsde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, outputs=True):
        p.add_argument("--config", required=True, help="JSON run configuration")
        if outputs:
            p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--no-facelift", action="store_true", help="skip the face-lift truncation")
        p.add_argument("--gradient", choices=["fd", "malliavin"], help="gradient estimator")

    p = sub.add_parser("solve", help="run the solver and write CSV artifacts")
    common(p)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("sweep", help="one run per value of a parameter")
    common(p)
    p.add_argument("--axis", choices=["nh", "dx", "mesh"], help="swept parameter (overrides config)")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("bounds", help="print the a-priori bounds")
    common(p, outputs=False)
    p.set_defaults(func=cmd_bounds)
    p = sub.add_parser("fit-driver", help="fit and save the spline driver")
    common(p)
    p.set_defaults(func=cmd_fit_driver)
    p = sub.add_parser("oracle", help=argparse.SUPPRESS)
    common(p)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return int(args.func(args))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BranchBSDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
