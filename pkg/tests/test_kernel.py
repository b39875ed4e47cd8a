import math

import mpmath
import numpy as np
import pytest
from scipy import integrate

from runmax import kernel
from runmax.kernel import (gaussian_envelope, h_function, h_function_derivative, kernel_partial_mass_b,
                           wedge_kernel, wedge_kernel_partial)


def _mp_kernel(b, a, t):
    b, t = mpmath.mpf(b), mpmath.mpf(t)
    a = [mpmath.mpf(x) for x in a]
    d = len(a)
    z = 2 * b - a[0]
    sq = z * z + sum(x * x for x in a[1:])
    return 2 * z / mpmath.sqrt((2 * mpmath.pi) ** d * t ** (d + 2)) * mpmath.exp(-sq / (2 * t))


def test_kernel_values():
    # 4/sqrt(2 pi) e^{-2}
    assert wedge_kernel(1.0, 0.0, 1.0) == pytest.approx(4 / math.sqrt(2 * math.pi) * math.exp(-2), rel=1e-14)
    assert wedge_kernel(-0.1, 0.0, 1.0) == 0.0
    assert wedge_kernel(0.5, 0.8, 1.0) == 0.0
    val = wedge_kernel(0.5, (0.2, 0.3), 0.7, d=2)
    assert val == pytest.approx(float(_mp_kernel(0.5, [0.2, 0.3], 0.7)), rel=1e-12)


def test_kernel_rejects_bad_time():
    with pytest.raises(ValueError):
        wedge_kernel(1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        kernel_partial_mass_b(1.0, 0.0, -1.0)


def test_kernel_nonnegative_and_underflow():
    rng = np.random.default_rng(1)
    b = rng.uniform(-5, 50, 10_000)
    a = rng.uniform(-50, 50, 10_000)
    v = wedge_kernel(b, a, 0.01)
    assert np.all(v >= 0)
    assert np.all(np.isfinite(v))
    assert wedge_kernel(40.0, 0.0, 1.0) == 0.0


@pytest.mark.parametrize("t", [0.1, 1.0, 4.0])
def test_normalisation_d1(t):
    r = 10 * math.sqrt(t)
    val, _ = integrate.dblquad(lambda a, b: wedge_kernel(b, a, t), 0, r, -r, lambda b: b,
                               epsabs=1e-12, epsrel=1e-12)
    assert abs(val - 1) <= 1e-8


def test_normalisation_d2():
    # Gauss-Legendre in a2 (smooth Gaussian factor), adaptive in the wedge (b, a1)
    x, w = np.polynomial.legendre.leggauss(120)
    a2, w = 9 * x, 9 * w
    val, _ = integrate.dblquad(lambda a1, b: float(np.dot(w, wedge_kernel(b, (a1, a2), 1.0, d=2))),
                               0, 9, -9, lambda b: b, epsabs=1e-11, epsrel=1e-11)
    assert abs(val - 1) <= 1e-8


def test_reflection_marginal():
    for b in (0.1, 0.7, 2.0):
        val, _ = integrate.quad(lambda a: wedge_kernel(b, a, 1.0), -20, b, epsabs=1e-13)
        assert val == pytest.approx(2 * kernel.norm_pdf(b), abs=1e-10)


def test_partials_match_finite_differences():
    b, a, t, h = 1.0, 0.0, 1.0, 1e-6
    fd_b = (wedge_kernel(b + h, a, t) - wedge_kernel(b - h, a, t)) / (2 * h)
    fd_a = (wedge_kernel(b, a + h, t) - wedge_kernel(b, a - h, t)) / (2 * h)
    assert wedge_kernel_partial("b", b, a, t) == pytest.approx(fd_b, rel=1e-6)
    assert wedge_kernel_partial("a1", b, a, t) == pytest.approx(fd_a, rel=1e-6)
    pt = (0.9, (0.3, -0.4))
    for k in (1, 2):
        up = list(pt[1])
        dn = list(pt[1])
        up[k - 1] += h
        dn[k - 1] -= h
        fd = (wedge_kernel(pt[0], tuple(up), 0.6, 2) - wedge_kernel(pt[0], tuple(dn), 0.6, 2)) / (2 * h)
        assert wedge_kernel_partial(f"a{k}", pt[0], pt[1], 0.6, 2) == pytest.approx(fd, rel=1e-6)


def test_partial_rejects_boundary():
    with pytest.raises(ValueError):
        wedge_kernel_partial("b", 0.5, 0.5, 1.0)
    with pytest.raises(ValueError):
        wedge_kernel_partial("b", 0.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        wedge_kernel_partial("a3", 1.0, 0.0, 1.0)


def test_partial_envelope_bound():
    """|d q| <= (D / sqrt t) envelope(b, b - a1, a~; t) for a finite D."""
    rng = np.random.default_rng(7)

    def ratios(n):
        t = rng.uniform(0.05, 4.0, n)
        s = np.sqrt(t)
        b = rng.uniform(0, 6, n) * s + 1e-9
        u = rng.uniform(0, 6, n) * s + 1e-9
        a1 = b - u
        a2 = rng.normal(0, 2, n) * s
        out = []
        for which in ("b", "a1", "a2"):
            dq = np.abs(wedge_kernel_partial(which, b, (a1, a2), t, 2))
            env = gaussian_envelope(b, u, a2, t, 2) / np.sqrt(t)
            out.append(dq / env)
        return np.max(out, axis=0)

    D = float(np.max(ratios(100_000)))
    assert np.isfinite(D)
    assert np.max(ratios(10_000)) <= 1.05 * D


def test_partial_mass():
    # (1/sqrt(2 pi)) (1 - e^{-2})
    assert kernel_partial_mass_b(1.0, 0.0, 1.0) == pytest.approx((1 - math.exp(-2)) / math.sqrt(2 * math.pi),
                                                                 rel=1e-14)
    quad, _ = integrate.quad(lambda b: wedge_kernel(b, 0.0, 1.0), 0, 1, epsabs=1e-14)
    assert kernel_partial_mass_b(1.0, 0.0, 1.0) == pytest.approx(quad, rel=1e-12)
    assert kernel_partial_mass_b(0.3, 0.3, 1.0) == 0.0
    assert kernel_partial_mass_b(0.0, -0.5, 1.0) == 0.0
    a = 0.4
    m = a + 20.0
    assert kernel_partial_mass_b(m, a, 1.0) == pytest.approx(kernel.norm_pdf(a), rel=1e-12)
    ms = np.linspace(0.4, 5, 50)
    assert np.all(np.diff(kernel_partial_mass_b(ms, a, 1.0)) >= 0)
    v = kernel_partial_mass_b(2.0, (0.5, 0.7), 0.8, 2)
    q, _ = integrate.quad(lambda b: wedge_kernel(b, (0.5, 0.7), 0.8, 2), 0.5, 2.0, epsabs=1e-14)
    assert v == pytest.approx(q, rel=1e-10)


def test_h_function():
    assert h_function(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
    val, _ = integrate.quad(h_function, 0, 10, epsabs=1e-13)
    assert abs(val - 0.25) <= 1e-6
    h8 = h_function(8.0)
    mp = mpmath.npdf(8) - 8 * mpmath.ncdf(-8)
    assert h8 < 1e-14
    assert h8 == pytest.approx(float(mp), rel=1e-8)
    rng = np.random.default_rng(3)
    pairs = np.sort(rng.uniform(-10, 10, (1000, 2)), axis=1)
    assert np.all(h_function(pairs[:, 0]) >= h_function(pairs[:, 1]))
    assert np.all(h_function(rng.uniform(-20, 40, 1000)) >= 0)
    th = np.linspace(-3, 3, 13)
    fd = (h_function(th + 1e-6) - h_function(th - 1e-6)) / 2e-6
    np.testing.assert_allclose(h_function_derivative(th), fd, atol=1e-8)


def test_envelope():
    assert gaussian_envelope(0.0, 0.0, None, 0.5) == pytest.approx(1 / math.pi, rel=1e-15)
    assert gaussian_envelope(-0.1, 0.0, None, 0.5) == 0.0
    assert gaussian_envelope(0.1, -0.1, None, 0.5) == 0.0
    lam, b, u, v, t = 1.7, 0.3, 0.8, -0.4, 0.6
    for d, vv in ((1, None), (2, v)):
        lhs = gaussian_envelope(lam * b, lam * u, None if vv is None else lam * vv, lam ** 2 * t, d)
        rhs = lam ** -(d + 1) * gaussian_envelope(b, u, vv, t, d)
        assert lhs == pytest.approx(rhs, rel=1e-13)


def test_convolution_identities():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        t = rng.uniform(0.1, 5)
        s = rng.uniform(0.01, 0.99) * t
        u, v, w = rng.normal(0, 2, (3, 2))
        lhs = kernel.convolution_exponent_lhs(u, v, w, s, t)
        rhs = kernel.convolution_exponent_rhs(u, v, w, s, t)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
    u = np.linspace(0.01, 10, 1000)
    assert np.all(kernel.norm_cdf(-u) <= kernel.gaussian_tail_bound(u))


def test_convolution_closed_forms_vs_quadrature():
    rng = np.random.default_rng(5)
    for _ in range(50):
        t = rng.uniform(0.2, 3)
        s = rng.uniform(0.05, 0.95) * t
        u, w, b = rng.normal(0, 1.5, 3)

        def f(v):
            return (np.exp(-(u - v) ** 2 / (4 * (t - s))) / np.sqrt(2 * np.pi * (t - s))
                    * np.exp(-(w - v) ** 2 / (4 * s)) / np.sqrt(2 * np.pi * s))

        half, _ = integrate.quad(f, -np.inf, b, epsabs=1e-13, epsrel=1e-12)
        full, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12)
        assert abs(kernel.half_line_convolution(b, u, w, s, t) - half) <= 1e-7
        assert abs(kernel.full_space_convolution(u, w, s, t)[()] - full) <= 1e-7
