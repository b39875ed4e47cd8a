import math

import numpy as np
import pytest
from scipy import integrate
from numpy.polynomial.hermite_e import hermeval

from runmax.kernel import wedge_kernel
from runmax.model import DiffusionModel, GridSpec, ModelError, build_grid, validate_model
from runmax.series import (OperatorEngine, SeriesError, fit_constant, gamma_ratio_bound, hat_tables, picard_step,
                           solve_series, solve_volterra, term_bound, truncation_bound)

MU = 0.5


@pytest.fixture(scope="module")
def const_drift():
    m = DiffusionModel.from_strings(str(MU))
    g = build_grid(GridSpec(dx=0.1, n_time=10), m, 1.0)
    return m, g, solve_series(m, g, 4)


def exact_term(n, g, t):
    """Taylor coefficient of the Girsanov tilt: mu^n t^{n/2} He_n(a/sqrt t)/n! * q."""
    M, (X,) = g.mesh()
    q = np.where(g.mask(), wedge_kernel(M, X, t), 0.0)
    c = np.zeros(n + 1)
    c[n] = 1
    return MU ** n * t ** (n / 2) * hermeval(X / math.sqrt(t), c) / math.factorial(n) * q


def test_zero_drift_degenerates_to_p0():
    m = DiffusionModel.from_strings("0")
    g = build_grid(GridSpec(dx=0.1, n_time=6), m, 1.0)
    sol = solve_series(m, g, 3)
    assert np.all(sol.norms[1:] == 0.0)
    np.testing.assert_array_equal(sol.partial_sum.values, sol.terms[0].values)
    np.testing.assert_array_equal(solve_volterra(m, g).values, sol.terms[0].values)


def test_constant_drift_terms(const_drift):
    m, g, sol = const_drift
    k = g.times.size - 1
    w = g.weights()
    for n in range(1, 5):
        err = np.sum(w * np.abs(sol.terms[n].values[k] - exact_term(n, g, 1.0)))
        assert err <= 2e-3, n
    # middle slice (t = 0.25, two grid cells per sqrt t, so a looser bound)
    k2 = g.times.size // 2
    t2 = float(g.times[k2])
    err = np.sum(w * np.abs(sol.terms[1].values[k2] - exact_term(1, g, t2)))
    assert err <= 4e-3


def test_constant_drift_partial_sum_vs_girsanov(const_drift):
    _, g, sol = const_drift
    k = g.times.size - 1
    M, (X,) = g.mesh()
    exact = np.where(g.mask(), np.exp(MU * X - MU ** 2 / 2) * wedge_kernel(M, X, 1.0), 0.0)
    err = np.abs(sol.partial_sum.values[k] - exact)
    assert np.max(err) <= 5e-3
    assert sol.partial_sum.mass(k) == pytest.approx(1.0, abs=2e-3)


def test_picard_step_is_linear(const_drift):
    m, g, sol = const_drift
    eng = OperatorEngine(m, g)
    p1 = sol.terms[1]
    a = picard_step(p1, m, eng)
    scaled = type(p1)(g, 2.5 * p1.values, "scaled")
    b = picard_step(scaled, m, eng)
    np.testing.assert_allclose(b.values, 2.5 * a.values, rtol=1e-12, atol=1e-15)


def test_drift_sign_symmetry():
    # drift -mu and +mu give terms of alternating sign
    gp = build_grid(GridSpec(dx=0.1, n_time=6), DiffusionModel.from_strings("0.5"), 1.0)
    sp = solve_series(DiffusionModel.from_strings("0.5"), gp, 2)
    sm = solve_series(DiffusionModel.from_strings("-0.5"), gp, 2)
    np.testing.assert_allclose(sm.terms[1].values, -sp.terms[1].values, atol=1e-14)
    np.testing.assert_allclose(sm.terms[2].values, sp.terms[2].values, atol=1e-14)


def test_bounds_and_report(const_drift):
    m, g, sol = const_drift
    t = g.times[1:]
    assert sol.fitted_c > 0
    for n in range(1, 5):
        assert np.all(sol.norms[n, 1:] <= term_bound(sol.fitted_c, 1, n, t) * (1 + 1e-9))
    assert np.all(truncation_bound(sol.fitted_c, 1, 4, t) >= term_bound(sol.fitted_c, 1, 5, t))
    r = gamma_ratio_bound(sol.fitted_c, 1, 3, 1.0)
    assert r == pytest.approx(term_bound(sol.fitted_c, 1, 4, 1.0) / term_bound(sol.fitted_c, 1, 3, 1.0))
    c1 = fit_constant(sol.norms, g.times, 1, steps=1)
    assert c1 <= sol.fitted_c
    assert np.all(sol.norms[1, 1:] <= term_bound(c1, 1, 1, t) * (1 + 1e-9))
    rep = sol.report()
    assert rep["n_terms"] == 4 and len(rep["term_l1_norms"]) == 5
    assert rep["fitted_C_first_step"] == pytest.approx(c1)


def test_hat_tables_match_quadrature():
    tau, h = 0.3, 0.05
    full, left = hat_tables("e0", tau, h, -200, 200)
    # the hats form a partition of unity
    assert np.sum(full) == pytest.approx(math.sqrt(2 * math.pi * tau), rel=1e-12)
    prof = lambda w: np.exp(-w * w / (2 * tau))  # noqa: E731
    for n in (-7, 0, 3):
        hat = lambda w: prof(w) * np.maximum(0.0, 1 - abs(w / h - n))  # noqa: E731
        val, _ = integrate.quad(hat, (n - 1) * h, (n + 1) * h, epsabs=1e-14)
        assert full[n + 200] == pytest.approx(val, rel=1e-9)
        half = lambda w: prof(w) * (1 - (w / h - n))  # noqa: E731
        val, _ = integrate.quad(half, n * h, (n + 1) * h, epsabs=1e-14)
        assert left[n + 200] == pytest.approx(val, rel=1e-9)


def test_input_errors():
    m = DiffusionModel.from_strings("0")
    g = build_grid(GridSpec(dx=0.2, n_time=4), m, 1.0)
    with pytest.raises(SeriesError):
        solve_series(m, g, 0)
    with pytest.raises(ModelError):
        solve_series(DiffusionModel.from_strings("0", diffusion="2"), g, 2)


def test_volterra_matches_series_tail():
    m = DiffusionModel.from_strings("tanh(x1)")
    m = m.with_certificate(validate_model(m, [(-20, 20)]))
    g = build_grid(GridSpec(dx=0.1, n_time=10), m, 1.0)
    sol = solve_series(m, g, 4)
    pv = solve_volterra(m, g)
    k = g.times.size - 1
    gap = np.sum(g.weights() * np.abs(pv.values[k] - sol.partial_sum.values[k]))
    assert gap <= sol.truncation[k]
    assert pv.mass(k) == pytest.approx(1.0, abs=3e-3)
