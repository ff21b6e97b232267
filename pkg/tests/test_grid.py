import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from branchbsde.grid import (
    GridFunction,
    facelift,
    finite_difference_gradient,
    interpolate,
    lipschitz_defect,
)


def line(values, dx=0.5, lo=-1.0):
    values = np.asarray(values, dtype=float)
    return GridFunction([lo], [dx], values.shape, values)


def test_facelift_spike_example():
    g = facelift(line([0, 0, 2, 0, 0]), 1.0)
    assert g.values == pytest.approx([1, 1, 1, 1, 1])


def test_facelift_constant_above_M_is_clamped():
    g = facelift(line(np.full(7, 3.0)), 2.0)
    assert np.all(g.values == 2.0)


def test_facelift_leaves_lipschitz_function_unchanged():
    x = np.linspace(-1, 1, 21)
    g = line(0.5 * np.sin(x), dx=0.1)
    assert np.array_equal(facelift(g, 1.0).values, g.values)


def test_facelift_two_dimensional_uses_l1_cone():
    v = np.zeros((5, 5))
    v[2, 2] = 1.0
    g = GridFunction([0.0, 0.0], [1.0, 1.0], (5, 5), v)
    out = facelift(g, 0.25).values
    ii, jj = np.meshgrid(range(5), range(5), indexing="ij")
    expected = np.maximum(0.0, 1.0 - 0.25 * (abs(ii - 2) + abs(jj - 2)))
    assert out == pytest.approx(np.clip(expected, -0.25, 0.25))


def test_facelift_rejects_bad_level():
    with pytest.raises(ValueError):
        facelift(line([0, 1]), 0.0)


vals = arrays(np.float64, st.integers(2, 30), elements=st.floats(-3, 3))
levels = st.floats(0.1, 4.0)


@given(vals, levels)
def test_facelift_output_is_bounded_lipschitz_majorant(v, M):
    g = line(v, dx=0.1)
    out = facelift(g, M).values
    assert np.all(np.abs(out) <= M)
    assert lipschitz_defect(g.with_values(out), M) <= 1e-12
    assert np.all(out >= np.minimum(v, M) - 1e-12)


@given(vals, levels)
def test_facelift_idempotent(v, M):
    once = facelift(line(v, dx=0.1), M)
    assert np.array_equal(facelift(once, M).values, once.values)


@given(vals, levels, st.floats(0.0, 2.0))
def test_facelift_monotone(v, M, shift):
    lo = facelift(line(v, dx=0.1), M).values
    hi = facelift(line(v + shift, dx=0.1), M).values
    assert np.all(hi >= lo - 1e-12)


@given(vals, vals, levels)
def test_facelift_non_expansive(a, b, M):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    ra = facelift(line(a, dx=0.1), M).values
    rb = facelift(line(b, dx=0.1), M).values
    assert np.abs(ra - rb).max() <= np.abs(a - b).max() + 1e-12


def test_interpolate_nodes_exact():
    x = np.linspace(-1, 1, 21)
    g = line(np.cos(x), dx=0.1)
    assert np.array_equal(interpolate(g, x[:, None]), np.cos(x))


def test_interpolate_reproduces_linear_at_midpoints():
    x = np.linspace(-1, 1, 21)
    g = line(2 * x + 0.3, dx=0.1)
    mid = (x[:-1] + x[1:]) / 2
    assert interpolate(g, mid[:, None]) == pytest.approx(2 * mid + 0.3, abs=1e-13)


def test_interpolate_quadratic_exact_off_nodes():
    x = np.linspace(-1, 1, 21)
    g = line(x**2, dx=0.1)
    q = np.linspace(0.31, 0.89, 17)
    assert interpolate(g, q[:, None]) == pytest.approx(q**2, abs=1e-13)


def test_interpolate_never_overshoots_stencil():
    v = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
    g = line(v, dx=1.0, lo=0.0)
    q = np.linspace(0, 4, 401)
    out = interpolate(g, q[:, None])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_interpolate_clamps_outside_box():
    x = np.linspace(-1, 1, 21)
    g = line(x, dx=0.1)
    assert interpolate(g, np.array([[-5.0], [5.0]])) == pytest.approx([-1.0, 1.0])


def test_interpolate_two_dimensional_bilinear_data():
    g = GridFunction.sample(lambda p: p[:, 0] + 2 * p[:, 1], [[0, 1], [0, 1]], 0.25)
    pts = np.random.default_rng(0).uniform(0, 1, (50, 2))
    assert interpolate(g, pts) == pytest.approx(pts[:, 0] + 2 * pts[:, 1], abs=1e-12)


def test_linear_interpolation_tag():
    x = np.linspace(0, 1, 11)
    g = GridFunction([0.0], [0.1], (11,), x**2, interp="linear")
    assert interpolate(g, np.array([[0.05]]))[0] == pytest.approx(0.005)


def test_fd_gradient_constant_and_linear():
    x = np.linspace(-1, 1, 21)
    assert np.all(finite_difference_gradient(line(np.full(21, 0.7), dx=0.1)).values == 0.0)
    assert finite_difference_gradient(line(x, dx=0.1)).values[:, 0] == pytest.approx(np.ones(21))


def test_fd_gradient_cos():
    x = np.linspace(-1, 1, 21)
    grad = finite_difference_gradient(line(np.cos(x), dx=0.1)).values[1:-1, 0]
    assert np.abs(grad + np.sin(x[1:-1])).max() < 0.01


def test_csv_round_trip(tmp_path):
    g = GridFunction.sample(lambda p: np.sin(p[:, 0]) * p[:, 1], [[0, 1], [-1, 1]], 0.25)
    g.to_csv(tmp_path / "g.csv")
    h = GridFunction.from_csv(tmp_path / "g.csv")
    assert h.shape == g.shape
    assert np.allclose(h.values, g.values)
