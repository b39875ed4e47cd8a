"""Drift tanh(x): Picard terms, Volterra fixed point and Monte Carlo.

Run: python3 demos/tanh_drift.py   (a few minutes on one core)
"""

import numpy as np

from runmax.analysis import boundary_residual, fp_interior_residual, hitting_probability
from runmax.mc import estimate_density, estimate_expectation, simulate
from runmax.model import DiffusionModel, GridSpec, build_grid, validate_model
from runmax.series import solve_series, solve_volterra

model = DiffusionModel.from_strings("tanh(x1)")
model = model.with_certificate(validate_model(model, [(-20, 20)]))
grid = build_grid(GridSpec(dx=0.05, n_time=20), model, 1.0)

sol = solve_series(model, grid, 4)
print("term norms at T  ", np.round(sol.norms[:, -1], 5))
print("fitted C         ", round(sol.fitted_c, 5), " truncation bound at T", round(float(sol.truncation[-1]), 5))
print("mass of P4 at T  ", round(sol.partial_sum.mass(grid.times.size - 1), 5))

k = grid.times.size - 1
print("interior residual", round(fp_interior_residual(sol.partial_sum, k, model).l1, 5))
print("boundary residual", round(boundary_residual(sol.partial_sum, k, model).l1, 5))

vol = solve_volterra(model, grid)
gap = np.sum(grid.weights() * np.abs(vol.values[k] - sol.partial_sum.values[k]))
print("L1(Volterra, P4) ", round(float(gap), 5))

ens = simulate(model, 1.0, 200_000, 1e-3, seed=11)
kde = estimate_density(ens, grid)
print("L1(KDE, P4)      ", round(float(np.sum(grid.weights() * np.abs(kde.values[k] - sol.partial_sum.values[k]))), 4))
p, se = estimate_expectation(ens, lambda m, xs: (m >= 1.0).astype(float))
print(f"P(M_1 >= 1): Volterra {hitting_probability(vol, 1.0, 1.0):.4f}, MC {p:.4f} +- {se:.4f}")
