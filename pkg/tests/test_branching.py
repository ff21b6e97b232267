import math

import numpy as np
import pytest

from branchbsde import backend
from branchbsde.branching import (
    BranchingConfig,
    IntervalEstimator,
    Prior,
    constant_prior,
    estimate_u_v,
    grow_tree,
    pack_inputs,
    planned_samples,
    sample_estimate,
)
from branchbsde.driver import constant_driver, linear_driver, polynomial_driver, zero_driver
from branchbsde.errors import ConfigurationError, ExplosionError
from branchbsde.grid import GridFunction
from branchbsde.rng import stream_key
from branchbsde.sde import SdeCoefficients, paper_coefficients

BOX = [[-3.0, 3.0]]
OU = SdeCoefficients.affine([[-1.0]], [0.0], [[0.3]])


def grid(fn, box=BOX, dx=0.05):
    return GridFunction.sample(fn, box, dx)


def estimator(drv, terminal, t0=0.0, t1=0.5, coef=None, **cfg):
    cfg = BranchingConfig(**cfg)
    prior = constant_prior(terminal, t0, t1, 0.05)
    return IntervalEstimator(cfg, coef or paper_coefficients(), drv, terminal, prior, t0, t1)


def mean_se(a):
    return a.mean(), a.std(ddof=1) / math.sqrt(len(a))


def ou_cos(x, tau, shift=0.0, scale=0.5):
    """``scale * E[cos X_tau]`` for dX = (-X + shift) dt + 0.3 dW."""
    m = x * math.exp(-tau) + shift * (1 - math.exp(-tau))
    v = 0.09 * (1 - math.exp(-2 * tau)) / 2
    return scale * math.cos(m) * math.exp(-v / 2)


def test_zero_driver_collapse():
    est = estimator(zero_driver(), grid(lambda x: np.ones(len(x))))
    u, v, _ = est.samples([0.2], stream_key(1), 0, 100_000, False)
    fbar = math.exp(-0.4 * 0.5)
    assert set(np.unique(u)) <= {0.0, 1.0 / fbar}
    m, se = mean_se(u)
    assert abs(m - 1.0) < 3 * se


def test_constant_driver_oracle():
    est = estimator(constant_driver(0.25), grid(lambda x: np.full(len(x), 0.5)))
    u, _, _ = est.samples([0.0], stream_key(2), 0, 100_000, False)
    m, se = mean_se(u)
    assert abs(m - (0.5 + 0.25 * 0.5)) < 3 * se


def test_linear_driver_oracle():
    c, tau = 0.3, 0.5
    est = estimator(linear_driver(c), grid(lambda x: 0.5 * np.cos(x[:, 0])), coef=OU)
    for x0 in (-0.5, 0.7):
        u, _, _ = est.samples([x0], stream_key(3), 0, 100_000, False)
        m, se = mean_se(u)
        assert abs(m - math.exp(c * tau) * ou_cos(x0, tau)) < 3 * se + 1e-3


def test_gradient_mark_oracle():
    # f = c Du shifts the drift by c, so u = E[g] under dX = (-X + c) dt + 0.3 dW
    c, tau = 0.4, 0.5
    drv = polynomial_driver([[0, 1]], [[c]], [[1.0]])
    est = estimator(drv, grid(lambda x: 0.5 * np.cos(x[:, 0])), coef=OU)
    u, _, _ = est.samples([0.3], stream_key(4), 0, 100_000, False)
    m, se = mean_se(u)
    assert abs(m - ou_cos(0.3, tau, shift=c)) < 3 * se + 2e-3


def test_mark_control_variate_keeps_mean_and_cuts_variance():
    drv = polynomial_driver([[0, 1]], [[0.5]], [[1.0]])
    term = grid(lambda x: 0.5 * x[:, 0])
    out = {}
    for flag in (True, False):
        est = estimator(drv, term, coef=OU, mark_control_variate=flag)
        out[flag] = est.samples([0.2], stream_key(5), 0, 100_000, False)[0]
    (m1, s1), (m0, s0) = mean_se(out[True]), mean_se(out[False])
    assert abs(m1 - m0) < 3 * math.hypot(s1, s0)
    assert out[True].var() < out[False].var()


def test_root_weight_gives_gradient():
    # zero driver: E[V] = d/dx E[g(X_end)]
    tau = 0.5
    est = estimator(zero_driver(), grid(lambda x: 0.5 * np.cos(x[:, 0])), coef=OU)
    x0 = 0.4
    _, v, _ = est.samples([x0], stream_key(6), 0, 200_000, True)
    m, se = mean_se(v[:, 0])
    h = 1e-5
    exact = (ou_cos(x0 + h, tau) - ou_cos(x0 - h, tau)) / (2 * h)
    assert abs(m - exact) < 3 * se + 1e-3


def test_sample_estimate_is_reproducible():
    drv = polynomial_driver([[1, 1], [0, 0]], [[0.3, 0.2]], [[1.0]])
    term = grid(lambda x: 0.5 * np.cos(x[:, 0]))
    prior = constant_prior(term, 0.0, 0.5, 0.05)
    cfg = BranchingConfig()
    a = sample_estimate(cfg, paper_coefficients(), drv, 0.0, [0.1], 0.5, term, prior, stream_key(7), 12)
    b = sample_estimate(cfg, paper_coefficients(), drv, 0.0, [0.1], 0.5, term, prior, stream_key(7), 12)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def recorded_trees(n=40):
    drv = polynomial_driver([[1, 1], [2, 0], [0, 0]], [[0.3, 0.2, 0.1]], [[1.0]])
    term = grid(lambda x: 0.5 + 0.25 * np.cos(x[:, 0]))
    prior = constant_prior(term, 0.0, 0.5, 0.05)
    cfg = BranchingConfig(rate=4.0)
    return [
        grow_tree(cfg, paper_coefficients(), drv, 0.0, [0.1], 0.5, term, prior, 11, i)
        for i in range(n)
    ]


def test_tree_determinism():
    for (s1, u1, _, n1, p1), (s2, u2, _, n2, p2) in zip(recorded_trees(10), recorded_trees(10)):
        assert (s1, u1, n1) == (s2, u2, n2)
        for a, b in zip(p1, p2):
            assert a.label == b.label and np.array_equal(a.x, b.x)


def test_recorded_tree_structure():
    trees = recorded_trees()
    assert max(size for _, _, _, size, _ in trees) > 3
    for status, u, _, size, parts in trees:
        assert status == 0
        root = parts[0]
        assert root.label == (1,) and root.mark == 0 and root.birth == 0.0
        assert root.grad_x[0] == pytest.approx(np.eye(1))
        by_label = {p.label: p for p in parts}
        assert math.isclose(u, math.prod(p.factor for p in parts), rel_tol=1e-12)
        for p in parts:
            assert p.times[0] == pytest.approx(p.birth) and p.times[-1] == pytest.approx(p.death)
            if p.survived:
                assert p.death == pytest.approx(0.5)
            kids = sorted((k for k in parts if k.label[:-1] == p.label), key=lambda k: k.label)
            if p.offspring is None or u == 0.0:
                continue
            assert len(kids) == sum(p.offspring)
            marks = [q for q, n in enumerate(p.offspring) for _ in range(n)]
            assert [k.mark for k in kids] == marks
            for k in kids:
                assert k.birth == p.death
                assert np.array_equal(k.x[0], p.x[-1])
                if k.mark:
                    assert np.array_equal(k.grad_x[0], np.eye(1))
            assert all(k.label[:-1] in by_label for k in kids)


def test_explosion_error():
    drv = polynomial_driver([[2, 0]], [[3.0]], [[1.0]])
    est = estimator(drv, grid(lambda x: np.ones(len(x))), t1=0.9, rate=20.0, max_particles=50)
    with pytest.raises(ExplosionError):
        est.samples([0.0], stream_key(8), 0, 2000, False)


def test_prior_must_cover_interval():
    term = grid(lambda x: np.ones(len(x)))
    prior = constant_prior(term, 0.5, 1.0, 0.05)
    with pytest.raises(ConfigurationError):
        IntervalEstimator(BranchingConfig(), paper_coefficients(), zero_driver(), term, prior, 0.0, 0.5)


def test_truncated_power_needs_short_interval():
    term = grid(lambda x: np.ones(len(x)))
    with pytest.raises(ConfigurationError):
        estimator(zero_driver(), term, t0=0.0, t1=1.0, lifetime="truncated-power")


def test_truncated_power_density_and_survival():
    cfg = BranchingConfig(lifetime="truncated-power")
    t = np.linspace(0.01, 0.99, 50)
    assert cfg.survival(t) == pytest.approx(1 - np.cbrt(t))
    assert cfg.density(t) * 3 * t ** (2 / 3) == pytest.approx(np.ones(50))


def test_sampling_policy_arithmetic():
    assert planned_samples(0.05, 0.000125, 500_000, 1000) == 160_000
    assert planned_samples(1.0, 0.000125, 500_000, 1000) == 500_000
    assert planned_samples(0.0, 0.000125, 500_000, 1000) == 1000
    assert planned_samples(math.inf, 0.000125, 500_000, 1000) == 500_000


def test_zero_variance_uses_pilot_only():
    term = grid(lambda x: np.full(len(x), 0.7))
    prior = constant_prior(term, 0.0, 0.5, 0.05)
    cfg = BranchingConfig(pilot=1000)
    # on a near-empty interval every root survives, so each sample equals g / Fbar
    res = estimate_u_v(cfg, paper_coefficients(), zero_driver(), 0.0, [0.0], 1e-9, term, prior, stream_key(9))
    assert res.n_used == 1000
    assert res.u == pytest.approx(0.7, rel=1e-6)


def test_default_probs_follow_coefficient_norms():
    drv = polynomial_driver([[1, 0], [0, 1]], [[0.3, -0.1]], [[1.0]])
    assert BranchingConfig().probs(drv) == pytest.approx([0.75, 0.25])
    with pytest.raises(ConfigurationError):
        BranchingConfig(offspring_probs=[1.0, 0.0]).probs(drv)


@pytest.mark.skipif(not backend.has_compiled(), reason="compiled core not built")
def test_backends_bitwise_equal_on_paper_problem(paper_setup):
    problem, drv, g, prior = paper_setup
    inp = pack_inputs(BranchingConfig(), problem.coef, drv, g, prior)
    fast = backend.kernel_for(inp, "compiled")
    slow = backend.kernel_for(inp, "python")
    k = stream_key(13, 0, 19, 4)
    for x0 in (-0.9, 0.0, 0.35):
        a = fast.run(np.array([x0]), 0.95, 0.05, k[0], k[1], 0, 400, True)
        b = slow.run(np.array([x0]), 0.95, 0.05, k[0], k[1], 0, 400, True)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert a[2:] == b[2:]
