import math

import numpy as np
import pytest

from branchbsde.driver import (
    LocalPolynomialDriver,
    TensorKernels,
    eval_f_bar,
    eval_f_circ,
    fit_from_driver,
    linear_driver,
    lipschitz_bound,
    polynomial_driver,
    sup_f_circ,
    zero_driver,
)
from branchbsde.errors import FitError
from branchbsde.problems import paper_fhat

PAPER_BOX = [[0.0, 1.0], [-1.0, 1.0]]


def dense(box, n=201):
    ys, zs = np.meshgrid(np.linspace(*box[0], n), np.linspace(*box[1], n), indexing="ij")
    return ys, zs


def fit_error(fhat, box, ny, nz):
    drv = fit_from_driver(fhat, box, ny, nz)
    ys, zs = dense(box)
    approx = eval_f_bar(drv, np.zeros(ys.shape + (1,)), ys, zs[..., None])
    return np.abs(approx - np.vectorize(fhat)(ys, zs)).max()


def test_zero_driver_is_zero():
    drv = zero_driver()
    assert eval_f_circ(drv, [0.3], 0.7, [1.2], 0.1, [-0.4]) == 0.0
    assert eval_f_bar(drv, [0.3], 5.0, [5.0]) == 0.0


def test_identity_in_y():
    drv = linear_driver(1.0)
    y = np.linspace(-2, 2, 9)
    assert eval_f_circ(drv, np.zeros((9, 1)), y, np.ones((9, 1)), 0 * y, np.zeros((9, 1))) == pytest.approx(y)


def test_bilinear_function_reproduced_exactly():
    box = [[0.0, 1.0], [0.0, 1.0]]
    assert fit_error(lambda y, z: y * z, box, 3, 7) < 1e-13


def test_paper_fit_exact_at_spline_nodes():
    drv = fit_from_driver(paper_fhat, PAPER_BOX, 20, 20)
    ys, zs = np.meshgrid(np.linspace(0, 1, 21), np.linspace(-1, 1, 21), indexing="ij")
    approx = eval_f_bar(drv, np.zeros(ys.shape + (1,)), ys, zs[..., None])
    assert approx == pytest.approx(np.vectorize(paper_fhat)(ys, zs), abs=1e-13)


def test_fit_error_shrinks_fourfold_under_refinement():
    fhat = lambda y, z: math.exp(y) * math.sin(z)  # noqa: E731
    ratio = fit_error(fhat, PAPER_BOX, 5, 5) / fit_error(fhat, PAPER_BOX, 10, 10)
    assert 3.0 < ratio < 5.0


def test_fit_rejects_non_finite_values():
    with pytest.raises(FitError):
        fit_from_driver(lambda y, z: 1.0 / y, PAPER_BOX, 2, 2)


def test_f_bar_clamps_outside_fit_box():
    drv = fit_from_driver(paper_fhat, PAPER_BOX, 5, 5)
    x = np.zeros(1)
    assert eval_f_bar(drv, x, 3.0, [-4.0]) == pytest.approx(eval_f_bar(drv, x, 1.0, [-1.0]))


def test_partition_of_unity():
    kern = fit_from_driver(paper_fhat, PAPER_BOX, 20, 10).kernels
    pts = np.random.default_rng(1).uniform([-0.5, -2.0], [1.5, 2.0], (10_000, 2))
    w = kern.weights(pts)
    assert np.all(w >= 0.0)
    assert w.sum(axis=1) == pytest.approx(np.ones(len(pts)), abs=1e-14)


def test_polynomial_exact_where_kernel_is_one():
    drv = fit_from_driver(paper_fhat, PAPER_BOX, 4, 4)
    # centre of cell (iy, iz) = (1, 2): y in [0.25, 0.5], z in [0, 0.5]
    yp, zp = 0.375, 0.25
    j = 1 * 4 + 2
    c0, cy, cz, cyz = drv.coeffs[j]
    y, z = 1.7, -0.6
    got = eval_f_circ(drv, [0.0], y, [z], yp, [zp])
    assert got == pytest.approx(c0 + cy * y + cz * z + cyz * y * z, abs=1e-14)


def test_measured_slopes_below_lipschitz_bound():
    drv = fit_from_driver(paper_fhat, PAPER_BOX, 20, 10)
    L = lipschitz_bound(drv)
    ys, zs = dense(PAPER_BOX, 401)
    f = eval_f_bar(drv, np.zeros(ys.shape + (1,)), ys, zs[..., None])
    sy = np.abs(np.diff(f, axis=0)).max() / (ys[1, 0] - ys[0, 0])
    sz = np.abs(np.diff(f, axis=1)).max() / (zs[0, 1] - zs[0, 0])
    assert max(sy, sz) <= L


def test_sup_examples():
    assert sup_f_circ(zero_driver(), 1.0) == 0.0
    assert sup_f_circ(linear_driver(1.0), 2.0) == 2.0


def test_sup_dominates_dense_sample(paper_problem):
    drv = paper_problem.build_driver(20, 20, 0.2, [[-1.6, 1.6]])
    rng = np.random.default_rng(2)
    n = 20_000
    x = rng.uniform(-1.6, 1.6, (n, 1))
    y, yp = rng.uniform(-1, 1, (2, n))
    z, zp = rng.uniform(-1, 1, (2, n, 1))
    t = rng.uniform(0, 1, n)
    vals = eval_f_circ(drv, x, y, z, yp, zp, t=t)
    assert np.abs(vals).max() <= sup_f_circ(drv, 1.0)


def test_multi_direction_monomials():
    drv = polynomial_driver([[0, 1, 0], [0, 0, 2]], [[1.0, 0.5]], [[1, 0], [0, 1]], d=2)
    z = np.array([0.3, -0.4])
    assert eval_f_circ(drv, np.zeros(2), 0.0, z, 0.0, np.zeros(2)) == pytest.approx(0.3 + 0.5 * 0.16)


def test_kernel_validation():
    with pytest.raises(ValueError):
        TensorKernels([[0.0, 0.0]])
    with pytest.raises(ValueError):
        TensorKernels([[0.0, 1.0]], blend=0.0)
    with pytest.raises(ValueError):
        LocalPolynomialDriver([[1, 0]], [[1.0]], [[2.0]], TensorKernels([[-1, 1], [-1, 1]]), 1)


def test_json_round_trip(tmp_path, paper_problem):
    drv = paper_problem.build_driver(5, 5, 0.2, [[-1.6, 1.6]])
    drv.save(tmp_path / "drv.json")
    back = LocalPolynomialDriver.load(tmp_path / "drv.json")
    rng = np.random.default_rng(3)
    args = (rng.uniform(-1, 1, (100, 1)), rng.uniform(0, 1, 100), rng.uniform(-1, 1, (100, 1)))
    a = eval_f_circ(drv, *args, args[1], args[2], t=0.3)
    b = eval_f_circ(back, *args, args[1], args[2], t=0.3)
    assert np.array_equal(a, b)
