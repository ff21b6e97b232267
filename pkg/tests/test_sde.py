import math

import numpy as np
import pytest
from scipy.linalg import expm

from branchbsde.bounds import c_mu_sigma
from branchbsde.errors import CoefficientDomainError, EllipticityError
from branchbsde.rng import make_stream
from branchbsde.sde import (
    SdeCoefficients,
    malliavin_weight,
    paper_coefficients,
    simulate_endpoints,
    simulate_path,
    step_count,
)


class FixedStream:
    """Stream stub returning preset normals."""

    def __init__(self, values):
        self.values = list(values)
        self.key, self.index = (0, 0), 0

    def next_normal(self):
        return self.values.pop(0)


def brownian():
    return SdeCoefficients.affine([[0.0]], [0.0], [[1.0]])


def test_identity_euler_step():
    path = simulate_path(brownian(), [0.0], 0.0, 1.0, 1.0, FixedStream([0.3]))
    assert path.x[-1, 0] == pytest.approx(0.3)
    assert path.grad_x[-1] == pytest.approx(np.eye(1))
    assert path.grad_x[0] == pytest.approx(np.eye(1))


def test_paper_coefficients_values():
    c = paper_coefficients()
    x = np.array([[-0.5], [0.4], [2.0]])
    assert c.mu(x)[:, 0] == pytest.approx(-0.5 * (x[:, 0] + 0.2))
    assert c.sigma(x)[:, 0, 0] == pytest.approx([0.1, 0.1 * 1.2, 0.15])
    assert c.a0 == pytest.approx(0.1)
    c.check_ellipticity(np.linspace(-3, 3, 101))


def test_path_grid_and_last_step():
    c = paper_coefficients()
    path = simulate_path(c, [0.1], 0.0, 0.0105, 0.002, make_stream(1))
    assert len(path.times) == step_count(0.0105, 0.002) + 1 == 7
    assert np.all(np.diff(path.times) > 0)
    assert path.times[-1] == pytest.approx(0.0105)
    assert np.diff(path.times)[-1] == pytest.approx(0.0005)


def test_path_reproducible():
    c = paper_coefficients()
    a = simulate_path(c, [0.2], 0.0, 1.0, 0.002, make_stream(7, 1))
    b = simulate_path(c, [0.2], 0.0, 1.0, 0.002, make_stream(7, 1))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.grad_x, b.grad_x)


def test_ou_mean_matches_closed_form():
    ou = SdeCoefficients.affine([[-1.0]], [0.0], [[1.0]])
    rng = np.random.default_rng(0)
    xt = simulate_endpoints(ou, [[1.0]], 1.0, 0.002, 100_000, rng)[0, :, 0]
    se = xt.std() / math.sqrt(len(xt))
    assert abs(xt.mean() - math.exp(-1.0)) < 3 * se + 2e-3  # Euler bias O(dt)


def test_weight_reduces_to_brownian_increment():
    path = simulate_path(brownian(), [0.0], 0.0, 0.5, 0.1, make_stream(3))
    w = malliavin_weight(path, 0.1, 0.5)
    inc = path.dw[1:].sum(axis=0)
    assert w == pytest.approx(inc / 0.4)


def test_weight_mean_zero_and_second_moment():
    c = SdeCoefficients.affine(np.zeros((2, 2)), [0.0, 0.0], np.eye(2))
    rng = np.random.default_rng(1)
    _, w = simulate_endpoints(c, [[0.0, 0.0]], 0.5, 0.05, 100_000, rng, with_weight=True)
    w = w[0]
    se = w.std(axis=0) / math.sqrt(len(w))
    assert np.all(np.abs(w.mean(axis=0)) < 3 * se)
    assert np.mean(np.sum(w**2, axis=1)) == pytest.approx(2 / 0.5, rel=0.02)


def test_integration_by_parts_against_finite_differences():
    c = paper_coefficients()
    x0, h = 0.4, 0.05
    rng = np.random.default_rng(11)
    xt, w = simulate_endpoints(c, [[x0]], 0.5, 0.002, 200_000, rng, with_weight=True)
    ibp = np.cos(xt[0, :, 0]) * w[0, :, 0]
    est, se = ibp.mean(), ibp.std() / math.sqrt(ibp.size)
    # common random numbers for the central difference
    vals = []
    for x in (x0 - h, x0 + h):
        r = np.random.default_rng(12)
        vals.append(np.cos(simulate_endpoints(c, [[x]], 0.5, 0.002, 200_000, r)[0, :, 0]).mean())
    fd = (vals[1] - vals[0]) / (2 * h)
    assert abs(est - fd) < 3 * se + 1e-3


def test_tangent_matches_matrix_exponential():
    A = np.array([[-0.5, 0.2], [0.1, -0.3]])
    c = SdeCoefficients.affine(A, [0.0, 0.1], 0.2 * np.eye(2))
    path = simulate_path(c, [0.0, 0.0], 0.0, 1.0, 0.001, make_stream(2))
    assert np.abs(path.grad_x[-1] - expm(A)).max() < 2e-3


def test_tangent_growth_below_c_mu_sigma():
    c = paper_coefficients()
    C = c_mu_sigma(c, 1.0, [[-2.0, 2.0]])
    rng = np.random.default_rng(4)
    norms = []
    for i in range(200):
        p = simulate_path(c, [rng.uniform(-1, 1)], 0.0, 1.0, 0.01, make_stream(4, i))
        norms.append(np.abs(p.grad_x[-1, 0, 0]))
    assert np.all(np.isfinite(norms))
    assert np.mean(norms) <= math.exp(C * 1.0)


def test_weight_argument_errors():
    path = simulate_path(brownian(), [0.0], 0.0, 0.5, 0.1, make_stream(3))
    with pytest.raises(ValueError):
        malliavin_weight(path, 0.3, 0.3)
    path.sigma[:] = 0.0
    with pytest.raises(EllipticityError):
        malliavin_weight(path, 0.0, 0.5)


def test_non_finite_coefficient_raises():
    c = SdeCoefficients.affine([[0.0]], [0.0], [[1.0]])
    c.mu = lambda x: np.full(np.shape(x), np.nan)
    with pytest.raises(CoefficientDomainError):
        simulate_path(c, [0.0], 0.0, 0.1, 0.01, make_stream(0))


def test_ellipticity_check_detects_floor_violation():
    c = paper_coefficients()
    c.a0 = 0.2
    with pytest.raises(EllipticityError):
        c.check_ellipticity([[0.0]])
