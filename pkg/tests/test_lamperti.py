import math

import numpy as np
import pytest
from scipy import integrate

from runmax.kernel import wedge_kernel
from runmax.lamperti import LampertiError, build_map, solve_lamperti, transform_model
from runmax.model import DiffusionModel, GridSpec, ModelError


def test_map_matches_quadrature_and_inverts():
    lm = build_map("2+tanh(x1)", (-8, 8))
    for x in (-7.0, -1.3, 0.0, 0.4, 5.5):
        exact, _ = integrate.quad(lambda s: 1 / (2 + math.tanh(s)), 0, x, epsabs=1e-13)
        assert float(lm.phi(x)) == pytest.approx(exact, abs=1e-9)
    xs = np.linspace(-7.9, 7.9, 501)
    np.testing.assert_allclose(lm.inverse(lm.phi(xs)), xs, atol=1e-10)
    assert np.all(np.diff(lm.phi(xs)) > 0)
    with pytest.raises(LampertiError):
        lm.phi(9.0)


def test_transformed_drift():
    model = DiffusionModel.from_strings("0.5*tanh(x1)", diffusion="2+tanh(x1)")
    lm = build_map(model.diffusion, (-8, 8))
    ym = transform_model(model, lm)
    x = np.array([-1.0, 0.3, 2.0])
    a = 2 + np.tanh(x)
    expected = 0.5 * np.tanh(x) / a - 0.5 * (1 - np.tanh(x) ** 2)
    np.testing.assert_allclose(ym.drift[0].evaluate([lm.phi(x)]), expected, atol=1e-9)
    # y-derivative by finite differences
    y = lm.phi(x)
    h = 1e-5
    fd = (ym.drift[0].evaluate([y + h]) - ym.drift[0].evaluate([y - h])) / (2 * h)
    np.testing.assert_allclose(ym.drift[0].differentiate(1).evaluate([y]), fd, atol=1e-6)
    assert ym.certificate is not None and ym.is_identity


def test_constant_diffusion_is_exact_scaling():
    # A = 2: (M, X) = 2 (max W, W), density q(m/2, x/2; t) / 4
    model = DiffusionModel.from_strings("0", diffusion="2")
    field, _, _ = solve_lamperti(model, GridSpec(dx=0.1, n_time=4), 1.0, n_terms=1)
    g = field.grid
    M, (X,) = g.mesh()
    for k in range(1, g.times.size):
        exact = np.where(g.mask(), wedge_kernel(M / 2, X / 2, g.times[k]) / 4, 0.0)
        assert np.max(np.abs(field.values[k] - exact)) <= 1e-4


def test_pipeline_errors():
    with pytest.raises(ModelError):
        solve_lamperti(DiffusionModel.from_strings("0"), GridSpec(dx=0.1), 1.0)
    with pytest.raises(ModelError):
        solve_lamperti(DiffusionModel.from_strings("0", diffusion="tanh(x1)"), GridSpec(dx=0.1), 1.0)
