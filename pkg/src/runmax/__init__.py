"""Joint density of a diffusion and the running maximum of its first component."""

from .exprlang import CoeffExpr, parse
from .kernel import gaussian_envelope, h_function, wedge_kernel
from .lamperti import build_map, solve_lamperti
from .mc import PathEnsemble, estimate_density, simulate, weak_identity_gap
from .model import DensityField, DiffusionModel, GridSpec, WedgeGrid, build_grid, validate_model
from .series import solve_series, solve_volterra

__all__ = [
    "CoeffExpr", "parse", "wedge_kernel", "h_function", "gaussian_envelope", "build_map", "solve_lamperti",
    "PathEnsemble", "simulate", "estimate_density", "weak_identity_gap", "DensityField", "DiffusionModel",
    "GridSpec", "WedgeGrid", "build_grid", "validate_model", "solve_series", "solve_volterra",
]
