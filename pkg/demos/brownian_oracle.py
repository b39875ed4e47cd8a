"""Brownian motion: every numerical route against the reflection-principle closed form.

Run: python3 demos/brownian_oracle.py   (a few seconds)
"""

import math
from dataclasses import replace

import numpy as np

from runmax.analysis import boundary_residual, fp_interior_residual, hitting_density, refinement_slope
from runmax.kernel import norm_pdf, wedge_kernel
from runmax.mc import estimate_expectation, simulate
from runmax.model import DiffusionModel, GridSpec, assemble_p0, build_grid

bm = DiffusionModel.from_strings("0")

# the kernel at (m, x) = (1, 0), t = 1 and P(M_1 >= 1) from the reflection principle
print("q(1, 0; 1)       =", float(wedge_kernel(1.0, 0.0, 1.0)))
print("P(M_1 >= 1)      =", 2 * (1 - 0.5 * math.erfc(-1 / math.sqrt(2))))

# residuals of the closed form on refined grids (slices clustered at T so only space error remains)
steps = [0.1, 0.05, 0.025]
interior, boundary = [], []
for dx in steps:
    g = build_grid(GridSpec(dx=dx, n_time=2), bm, 1.0)
    g = replace(g, times=np.concatenate([[0.0], 1.0 + 1e-3 * np.arange(-4, 1)]))
    p = assemble_p0(bm, g)
    interior.append(fp_interior_residual(p, 5, bm).l1)
    boundary.append(boundary_residual(p, 5, bm).l1)
print("interior residual", np.round(interior, 6), "order", round(refinement_slope(steps, interior), 2))
print("boundary residual", np.round(boundary, 6), "order", round(refinement_slope(steps, boundary), 2))

# hitting-time density of level 1 at t = 1 is phi(1)
print("tau_1 density    =", hitting_density(p, 1.0, 1.0), "exact", norm_pdf(1.0))

# Monte Carlo with and without the bridge maximum
for bridge in (False, True):
    ens = simulate(bm, 1.0, 200_000, 0.02, seed=1, bridge=bridge)
    est, se = estimate_expectation(ens, lambda m, xs: (m >= 1.0).astype(float))
    print(f"MC bridge={bridge!s:5}  P(M_1 >= 1) = {est:.4f} +- {se:.4f}")
