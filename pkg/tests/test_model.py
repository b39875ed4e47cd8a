import numpy as np
import pytest

from runmax.model import (DiffusionModel, EllipticityError, GridError, GridSpec, ModelError,
                          UnboundedCoefficientError, assemble_p0, build_grid, truncation_radius, validate_model)


def test_model_construction():
    m = DiffusionModel.from_strings("0.5*tanh(x1)")
    assert m.d == 1 and m.is_identity and not m.zero_drift
    assert DiffusionModel.from_strings("0").zero_drift
    with pytest.raises(ModelError):
        DiffusionModel.from_strings(["x2"], d=1)
    with pytest.raises(ModelError):
        DiffusionModel.from_strings("0", x0=[0.0, 1.0], weights=[0.5, 0.6])
    m2 = DiffusionModel.from_strings(["0", "x1"], x0=[0.0, 0.0])
    assert m2.d == 2 and m2.initial_points.shape == (1, 2)


def test_certificate():
    m = DiffusionModel.from_strings("tanh(x1)")
    cert = validate_model(m, [(-5, 5)])
    assert cert.sup_drift <= 1.0 and cert.sup_drift > 0.99
    assert cert.sup_grad_drift == pytest.approx(1.0)
    assert '"sup_drift"' in cert.to_json()
    with pytest.raises(UnboundedCoefficientError):
        validate_model(DiffusionModel.from_strings("exp(x1^2)"), [(-10, 10)])
    with pytest.raises(EllipticityError):
        validate_model(DiffusionModel.from_strings("0", diffusion="sin(x1)"), [(-5, 5)])
    with pytest.raises(ValueError):
        validate_model(m, n_samples=10)
    c = validate_model(DiffusionModel.from_strings("0", diffusion="2+tanh(x1)"), [(-5, 5)])
    assert c.inf_a > 1.0 and c.sup_a < 3.0


def test_grid_geometry():
    m = DiffusionModel.from_strings("0", x0=0.3)
    g = build_grid(GridSpec(dx=0.1, n_time=10), m, 1.0)
    assert g.x1[g.m_start] == 0.3  # exact initial node
    assert g.m[0] == 0.3
    assert g.times[0] == 0 and g.times[-1] == 1.0
    assert np.all(np.diff(g.times) > 0)
    pad = truncation_radius(1e-6) * np.sqrt(2.0)
    assert g.x1[0] <= 0.3 - pad and g.x1[-1] >= 0.3 + pad
    assert g.mask()[0, g.m_start] and not g.mask()[0, g.m_start + 1]


def test_grid_errors():
    m = DiffusionModel.from_strings("0")
    with pytest.raises(GridError):
        build_grid(GridSpec(), m, 0.0)
    with pytest.raises(GridError):
        build_grid(GridSpec(), m, 1.0, eps_trunc=0.5)
    with pytest.raises(GridError):
        build_grid(GridSpec(time_spacing="log"), m, 1.0)
    with pytest.raises(GridError):
        build_grid(GridSpec(), DiffusionModel.from_strings(["0", "0", "0"]), 1.0)


def test_wedge_weights_integrate_linear_functions():
    m = DiffusionModel.from_strings("0")
    g = build_grid(GridSpec(dx=0.1, n_time=2), m, 1.0)
    w = g.weights()
    M, (X,) = g.mesh()
    # area of the truncated wedge {0 <= m <= mh, lo <= x <= m}
    mh, lo = g.m[-1], g.x1[0]
    area = 0.5 * (mh - lo) ** 2 - 0.5 * (0 - lo) ** 2
    assert np.sum(w) == pytest.approx(area, rel=1e-12)
    first = np.sum(w * np.broadcast_to(X, w.shape))
    exact = ((mh ** 3 - 0.0) / 3 - lo ** 2 * (mh - 0.0)) / 2
    assert first == pytest.approx(exact, rel=1e-10)


def test_p0_mass_and_mixture():
    m = DiffusionModel.from_strings("0", x0=[-0.5, 0.5], weights=[0.3, 0.7])
    g = build_grid(GridSpec(dx=0.05, n_time=4), m, 1.0)
    p0 = assemble_p0(m, g)
    assert abs(p0.mass(g.times.size - 1) - 1.0) < 2e-3
    assert np.all(p0.values >= 0)
    with pytest.raises(ModelError):
        assemble_p0(DiffusionModel.from_strings("0", diffusion="2"), g)
