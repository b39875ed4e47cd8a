import math
from dataclasses import replace

import numpy as np
import pytest

from runmax import analysis
from runmax.analysis import (AnalysisError, boundary_residual, boundary_trace, coarsen, conditional_max_check,
                             fp_interior_residual, hitting_density, hitting_probability, refinement_slope)
from runmax.kernel import norm_pdf
from runmax.mc import simulate
from runmax.model import DensityField, DiffusionModel, GridSpec, assemble_p0, build_grid

BM = DiffusionModel.from_strings("0")


def clustered(model, dx, T=1.0, h=1e-3):
    """Closed-form field on a grid whose slices cluster at T (negligible time error)."""
    g = build_grid(GridSpec(dx=dx, n_time=2), model, T)
    g = replace(g, times=np.concatenate([[0.0], T + h * np.arange(-4, 1)]))
    return assemble_p0(model, g)


def girsanov(mu, dx, T=1.0):
    m = DiffusionModel.from_strings(str(mu))
    f = clustered(DiffusionModel.from_strings("0"), dx, T)
    g = f.grid
    M, (X,) = g.mesh()
    vals = f.values * np.exp(mu * X - 0.5 * mu * mu * g.times[:, None, None])
    return m, DensityField(g, np.where(g.mask(), vals, 0.0), "girsanov")


def test_refinement_slope():
    assert refinement_slope([0.1, 0.05, 0.025], [4e-2, 1e-2, 2.5e-3]) == pytest.approx(2.0)


def test_interior_residual_brownian_second_order():
    steps = [0.1, 0.05, 0.025]
    norms = [fp_interior_residual(clustered(BM, dx), 5, BM).l1 for dx in steps]
    assert refinement_slope(steps, norms) >= 1.8


def test_boundary_residual_second_order():
    steps = [0.1, 0.05, 0.025]
    norms = [boundary_residual(clustered(BM, dx), 5, BM).l1 for dx in steps]
    assert refinement_slope(steps, norms) >= 1.8
    res = []
    for dx in steps:
        m, f = girsanov(0.5, dx)
        res.append(boundary_residual(f, 5, m).l1)
    assert refinement_slope(steps, res) >= 1.8


def test_hitting_density_brownian():
    f = clustered(BM, 0.025)
    # tau_1 density at t = 1: phi(1)
    assert hitting_density(f, 1.0, 1.0) == pytest.approx(norm_pdf(1.0), abs=1e-3)
    # closed-form values sit on the diagonal nodes themselves
    assert hitting_density(f, 1.0, 1.0, method="node") == pytest.approx(norm_pdf(1.0), rel=1e-9)
    with pytest.raises(AnalysisError):
        hitting_density(f, 100.0, 1.0)
    with pytest.raises(ValueError):
        boundary_trace(f, 5, method="spline")


def test_hitting_probability_brownian():
    g = build_grid(GridSpec(dx=0.025, n_time=40), BM, 1.0)
    f = assemble_p0(BM, g)
    exact = 2 * (1 - 0.8413447460685429)
    assert hitting_probability(f, 1.0, 1.0) == pytest.approx(exact, abs=5e-3)


def test_coarsen_keeps_initial_node():
    f = clustered(BM, 0.05)
    c = coarsen(f)
    assert c.grid.dx == pytest.approx(0.1)
    assert c.grid.x1[c.grid.m_start] == 0.0
    ref = clustered(BM, 0.1)
    i0 = ref.grid.m_start - c.grid.m_start
    assert i0 >= 0
    sub = ref.values[-1][:, i0:i0 + c.grid.n]
    np.testing.assert_allclose(c.values[-1][:sub.shape[0], :sub.shape[1]], sub[:c.grid.n_m], atol=1e-14)


def test_residual_report_json():
    r = fp_interior_residual(clustered(BM, 0.1), 5, BM)
    d = r.to_dict()
    assert d["kind"] == "interior" and d["l1"] == pytest.approx(r.l1)
    assert '"linf"' in r.to_json()


def test_slope_estimator_converges():
    ens = simulate(BM, 1.0, 200_000, 0.1, seed=3)
    f = clustered(BM, 0.05)
    res = analysis.local_slope(BM, 1.0, [0.1, 0.01, 0.001], f, ensemble=ens)
    assert res["target"] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=2e-3)
    errs = [abs(r["estimate"] - 1 / math.sqrt(2 * math.pi)) for r in res["rows"]]
    assert errs[0] > errs[1]
    last = res["rows"][-1]
    assert abs(last["estimate"] - 1 / math.sqrt(2 * math.pi)) <= 3 * last["se"]
    zero = analysis.local_slope(BM, 1.0, [0.1], psi="0", ensemble=ens)
    assert zero["rows"][0]["estimate"] == 0.0


def test_conditional_max_identity():
    states = [(0.0, 0.0), (0.5, 0.3), (1.0, -0.5)]
    rows = conditional_max_check(DiffusionModel.from_strings("0", diffusion="2+tanh(x1)"), states, 0.01,
                                 n_inner=50_000)
    assert all(r["passed"] for r in rows)
    with pytest.raises(AnalysisError):
        conditional_max_check(BM, [(0.0, 1.0)], 0.01)
