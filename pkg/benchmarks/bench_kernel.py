"""Compiled vs pure-Python branching kernel on the paper example.

Times one interval of length 0.05 ending at T, sampled at a few spatial nodes,
and checks that both backends return bit-identical samples.

    python benchmarks/bench_kernel.py --samples 2000 --nodes 3
"""

import argparse
import time

import numpy as np

from branchbsde import backend
from branchbsde.branching import BranchingConfig, Prior, pack_inputs
from branchbsde.grid import GridFunction
from branchbsde.problems import get_problem
from branchbsde.rng import stream_key


def build_inputs(n_y, n_z):
    problem = get_problem("paper-example")
    box = [[-1.6, 1.6]]
    drv = problem.build_driver(n_y, n_z, 0.2, box)
    g = GridFunction.sample(problem.terminal, box, 0.1)
    du = g.with_values((-np.sin(g.nodes()[:, 0]) / 2).reshape(g.shape + (1,)))
    prior = Prior(0.95, 0.05, [g, g], [du, du])
    return pack_inputs(BranchingConfig(), problem.coef, drv, g, prior)


def time_kernel(kernel, xs, samples, compute_v):
    out = []
    t0 = time.perf_counter()
    for n, x in enumerate(xs):
        k = stream_key(7, 0, 19, n)
        out.append(kernel.run(np.array([x]), 0.95, 0.05, k[0], k[1], 0, samples, compute_v))
    return time.perf_counter() - t0, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000, help="samples per node")
    ap.add_argument("--nodes", type=int, default=3, help="spatial nodes")
    ap.add_argument("--mesh", type=int, nargs=2, default=[20, 10], metavar=("NY", "NZ"))
    ap.add_argument("--no-v", action="store_true", help="skip the gradient weight")
    args = ap.parse_args(argv)

    inp = build_inputs(*args.mesh)
    xs = np.linspace(-0.8, 0.8, args.nodes)
    compute_v = not args.no_v
    total = args.samples * args.nodes

    t_py, out_py = time_kernel(backend.kernel_for(inp, "python"), xs, args.samples, compute_v)
    print(f"{'backend':<10} {'seconds':>10} {'us/sample':>12}")
    print(f"{'python':<10} {t_py:10.3f} {1e6 * t_py / total:12.2f}")
    if not backend.has_compiled():
        print("compiled core not built; run `python setup.py build_ext --inplace`")
        return 0
    t_c, out_c = time_kernel(backend.kernel_for(inp, "compiled"), xs, args.samples, compute_v)
    print(f"{'compiled':<10} {t_c:10.3f} {1e6 * t_c / total:12.2f}")
    same = all(
        np.array_equal(a[0], b[0]) and (not compute_v or np.array_equal(a[1], b[1]))
        for a, b in zip(out_py, out_c)
    )
    print(f"speed-up {t_py / t_c:.1f}x, identical samples: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
