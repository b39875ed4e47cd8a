import numpy as np
import pytest

from runmax import exprlang
from runmax.kernel import wedge_kernel
from runmax.model import DiffusionModel, GridSpec, build_grid
from runmax.mc import estimate_density, estimate_expectation, generator_expression, simulate

BM = DiffusionModel.from_strings("0")


def test_determinism_and_threads():
    a = simulate(BM, 1.0, 70_000, 0.05, seed=5)
    b = simulate(BM, 1.0, 70_000, 0.05, seed=5, threads=3)
    np.testing.assert_array_equal(a.m, b.m)
    np.testing.assert_array_equal(a.x, b.x)
    c = simulate(BM, 1.0, 70_000, 0.05, seed=6)
    assert not np.array_equal(a.x, c.x)


def test_bridge_shares_increments():
    a = simulate(BM, 1.0, 5000, 0.1, seed=2, bridge=True)
    b = simulate(BM, 1.0, 5000, 0.1, seed=2, bridge=False)
    np.testing.assert_array_equal(a.x, b.x)
    assert np.all(a.m >= b.m)
    assert np.all(a.m >= a.x[:, 0])


def test_reflection_probability():
    ens = simulate(BM, 1.0, 200_000, 0.02, seed=1)
    p, se = estimate_expectation(ens, lambda m, xs: (m >= 1.0).astype(float))
    assert abs(p - 0.317311) <= 3 * se + 1e-3


def test_discrete_monitoring_bias_without_bridge():
    ens = simulate(BM, 1.0, 100_000, 0.1, seed=1, bridge=False)
    p, se = estimate_expectation(ens, lambda m, xs: (m >= 1.0).astype(float))
    assert p < 0.317311 - 5 * se


def test_argument_errors():
    with pytest.raises(ValueError):
        simulate(BM, 1.0, 10, 0.5)
    with pytest.raises(ValueError):
        simulate(BM, 1.0, 0, 0.01)
    with pytest.raises(ValueError):
        simulate(BM, 1.0, 10, 0.01, snapshot_times=[2.0])


def test_snapshots_and_expression_input():
    ens = simulate(BM, 1.0, 20_000, 0.01, seed=3, snapshot_times=[0.5])
    m5, x5 = ens.snapshots[0.5]
    assert np.all(ens.m >= m5)
    mean, se = estimate_expectation(ens, "x1^2", at=0.5)
    assert abs(mean - 0.5) <= 4 * se


def test_generator_of_quadratic():
    # L(x1^2) = 2 B x1 + 1
    m = DiffusionModel.from_strings("0.5")
    lf = generator_expression(exprlang.parse("x1^2"), m)
    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(lf(x, [x]), x + 1.0)


def test_kde_against_closed_form():
    ens = simulate(BM, 1.0, 200_000, 0.01, seed=4)
    g = build_grid(GridSpec(dx=0.05, n_time=2), BM, 1.0)
    est = estimate_density(ens, g)
    k = g.times.size - 1
    assert est.mass(k) == pytest.approx(1.0, abs=1e-3)
    M, (X,) = g.mesh()
    exact = np.where(g.mask(), wedge_kernel(M, X, 1.0), 0.0)
    assert np.sum(g.weights() * np.abs(est.values[k] - exact)) <= 0.05
