"""Lamperti reduction of a scalar diffusion to unit diffusion coefficient.

phi(x) = int_0^x dz / A(z) is tabulated and interpolated with cubic Hermite
pieces (the slopes 1/A are exact), Y = phi(X) solves

    dY = [(B/A) - A'/2](phi^{-1}(Y)) dt + dW,

and densities pull back with p_V(b, a) = p_Y(phi(b), phi(a)) / (A(b) A(a)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import exprlang
from .exprlang import CoeffExpr
from .model import (DensityField, DiffusionModel, EllipticityError, GridSpec, ModelError, WedgeGrid,
                    build_grid, truncation_radius, validate_model)


class LampertiError(ValueError):
    pass


def _reciprocal(A: CoeffExpr) -> CoeffExpr:
    return CoeffExpr(exprlang.Div(exprlang.Num(1.0), A.ast))


@dataclass(frozen=True)
class LampertiMap:
    nodes: np.ndarray
    values: np.ndarray  # phi at the nodes
    A: CoeffExpr
    spline: CubicHermiteSpline
    inverse_spline: CubicHermiteSpline

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.nodes[0]), float(self.nodes[-1])

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        if np.any((x < lo) | (x > hi)):
            raise LampertiError("point outside the tabulated domain")
        return self.spline(x)

    def inverse(self, y, iterations: int = 3):
        """phi^{-1}(y): Hermite inverse table as initial guess, then Newton with phi' = 1/A."""
        y = np.asarray(y, dtype=float)
        if np.any((y < self.values[0]) | (y > self.values[-1])):
            raise LampertiError("value outside the tabulated range")
        x = np.clip(self.inverse_spline(y), self.nodes[0], self.nodes[-1])
        for _ in range(iterations):
            x = np.clip(x - (self.spline(x) - y) * self.A.evaluate([x]), self.nodes[0], self.nodes[-1])
        return x


def build_map(A, domain=(-10.0, 10.0), tol: float = 1e-10, n_samples: int = 4096) -> LampertiMap:
    """Tabulate phi with phi(0) = 0 on ``domain`` (extended to contain 0)."""
    if isinstance(A, str):
        A = exprlang.parse(A)
    lo, hi = float(min(domain[0], 0.0)), float(max(domain[1], 0.0))
    if not hi > lo:
        raise LampertiError("empty domain")
    xs = np.linspace(lo, hi, max(n_samples, 1000))
    a = np.asarray(A.evaluate([xs]), dtype=float)
    if np.min(a) <= 0:
        raise EllipticityError(f"sampled inf A = {np.min(a):.4g} <= 0 (A must be positive)")
    # cubic Hermite error <= h^4/384 sup|phi''''| ; phi'''' = (1/A)'''
    d3 = _reciprocal(A).differentiate(1).differentiate(1).differentiate(1)
    try:
        m4 = float(np.max(np.abs(d3.evaluate([xs]))))
    except exprlang.EvaluationError:
        m4 = 1.0
    h = (384.0 * tol / max(m4, 1e-12)) ** 0.25
    h = min(h, 0.05)
    n_cells = int(math.ceil((hi - lo) / h))
    if n_cells < 2:
        raise LampertiError("domain too small for the requested table")
    nodes = np.linspace(lo, hi, n_cells + 1)
    # Gauss-Legendre (8 points) on every cell, cumulated from 0
    gx, gw = np.polynomial.legendre.leggauss(8)
    left, right = nodes[:-1], nodes[1:]
    half = 0.5 * (right - left)
    pts = (0.5 * (left + right))[:, None] + half[:, None] * gx[None, :]
    cell = np.sum(gw[None, :] / np.asarray(A.evaluate([pts]), dtype=float), axis=1) * half
    vals = np.concatenate([[0.0], np.cumsum(cell)])
    # shift so phi(0) = 0 exactly: integrate from the nearest node to 0
    k0 = int(np.argmin(np.abs(nodes)))
    x0 = nodes[k0]
    if x0 != 0.0:
        a0, b0 = sorted((0.0, x0))
        mid, hw = 0.5 * (a0 + b0), 0.5 * (b0 - a0)
        part = np.sum(gw / np.asarray(A.evaluate([mid + hw * gx]), dtype=float)) * hw
        off = vals[k0] - (part if x0 > 0 else -part)
    else:
        off = vals[k0]
    vals = vals - off
    slopes = 1.0 / np.asarray(A.evaluate([nodes]), dtype=float)
    spline = CubicHermiteSpline(nodes, vals, slopes)
    inv = CubicHermiteSpline(vals, nodes, 1.0 / slopes)
    return LampertiMap(nodes, vals, A, spline, inv)


class LampertiDrift:
    """Y-drift B_phi(y) = (B/A)(x) - A'(x)/2 at x = phi^{-1}(y); duck-types CoeffExpr."""

    def __init__(self, B: CoeffExpr, lmap: LampertiMap, order: int = 0):
        self.B = B
        self.lmap = lmap
        self.order = order
        A = lmap.A
        ratio = CoeffExpr(exprlang.Div(B.ast, A.ast))
        a1 = A.differentiate(1)
        self._f = CoeffExpr(exprlang.Sub(ratio.ast, exprlang.Mul(exprlang.Num(0.5), a1.ast)))
        self._df = self._f.differentiate(1)

    @property
    def variables(self) -> set:
        return {"x1"}

    is_constant = False
    max_index = 1

    def evaluate(self, x, m=None):
        y = np.asarray(x[0], dtype=float)
        xx = self.lmap.inverse(y)
        if self.order == 0:
            return np.asarray(self._f.evaluate([xx]), dtype=float)
        # d/dy f(phi^{-1}(y)) = f'(x) A(x)
        return np.asarray(self._df.evaluate([xx]) * self.lmap.A.evaluate([xx]), dtype=float)

    def eval(self, point, m=None):
        return float(self.evaluate([np.asarray([point[0]])])[0])

    def differentiate(self, var=1):
        if var not in (1, "x1") or self.order >= 1:
            raise LampertiError("only the first y-derivative of the transformed drift is available")
        return LampertiDrift(self.B, self.lmap, order=1)


def transform_model(model: DiffusionModel, lmap: LampertiMap, certify: bool = True) -> DiffusionModel:
    """Unit-diffusion model for Y = phi(X)."""
    if model.d != 1:
        raise ModelError("Lamperti transform is available for d = 1 only")
    A = model.diffusion if not model.is_identity else exprlang.parse("1")
    if A.to_source() != lmap.A.to_source():
        raise LampertiError("map was built for a different diffusion coefficient")
    drift = LampertiDrift(model.drift[0], lmap)
    y0 = lmap.phi(model.initial_points[:, 0]).reshape(-1, 1)
    ym = DiffusionModel(1, (drift,), y0, model.initial_weights.copy())
    if certify:
        lo, hi = lmap.values[0], lmap.values[-1]
        cert = validate_model(ym, [(lo, hi)], n_samples=2048)
        ym = ym.with_certificate(cert)
    return ym


def pullback_density(pY: DensityField, lmap: LampertiMap, x_grid: WedgeGrid) -> DensityField:
    """p_V(b, a; t) = p_Y(phi(b), phi(a); t) / (A(b) A(a)) on the X wedge nodes.

    p_Y is interpolated linearly on the triangles obtained by cutting each
    lattice cell along the direction of the diagonal, so cells on the wedge
    edge only use wedge nodes.
    """
    gy = pY.grid
    if gy.d != 1 or x_grid.d != 1:
        raise LampertiError("pull-back is for d = 1")
    m, xs = x_grid.mesh()
    b = np.broadcast_to(m, x_grid.slice_shape)
    a = np.broadcast_to(xs[0], x_grid.slice_shape)
    mask = x_grid.mask()
    fb = lmap.phi(b[mask])
    fa = lmap.phi(a[mask])
    fi = (fb - gy.x1[0]) / gy.dx
    fj = (fa - gy.x1[0]) / gy.dx
    i0 = np.floor(fi + 1e-9).astype(np.int64)
    j0 = np.floor(fj + 1e-9).astype(np.int64)
    u = np.clip(fi - i0, 0.0, 1.0)
    v = np.clip(fj - j0, 0.0, 1.0)
    r0 = i0 - gy.m_start
    if np.any(r0 < 0) or np.any(i0 + 1 > gy.n - 1 + 1) or np.any(j0 < 0) or np.any(r0 + 1 > gy.n_m):
        raise LampertiError("target node maps outside the Y grid")
    r1 = np.minimum(r0 + 1, gy.n_m - 1)
    j1 = np.minimum(j0 + 1, gy.n - 1)
    upper = u >= v
    jac = 1.0 / (np.asarray(lmap.A.evaluate([b[mask]])) * np.asarray(lmap.A.evaluate([a[mask]])))
    out = np.zeros((gy.times.size,) + x_grid.slice_shape)
    for k in range(gy.times.size):
        P = pY.values[k]
        p00 = P[r0, j0]
        p10 = P[r1, j0]
        p11 = P[r1, j1]
        p01 = P[r0, j1]
        val = np.where(upper, p00 + u * (p10 - p00) + v * (p11 - p10),
                       p00 + v * (p01 - p00) + u * (p11 - p01))
        sl = np.zeros(x_grid.slice_shape)
        sl[mask] = val * jac
        out[k] = sl
    xg = WedgeGrid(x_grid.d, x_grid.dx, x_grid.lo, x_grid.n, x_grid.m_start, gy.times.copy(),
                   None, x_grid.eps_trunc, x_grid.pad, x_grid.origin)
    return DensityField(xg, out, pY.tag + "+pullback")


def y_grid_for(lmap: LampertiMap, y_model: DiffusionModel, dy: float, spec: GridSpec, T: float,
               eps_trunc: float) -> WedgeGrid:
    """Unit-diffusion grid for Y with step ``dy`` and the usual truncation padding."""
    ys = GridSpec(dx=dy, n_time=spec.n_time, time_spacing=spec.time_spacing)
    grid = build_grid(ys, y_model, T, eps_trunc)
    if grid.x1[0] < lmap.values[0] or grid.x1[-1] > lmap.values[-1]:
        raise LampertiError("Y grid leaves the tabulated range of phi")
    return grid


def x_grid_for(model: DiffusionModel, lmap: LampertiMap, y_grid: WedgeGrid, spec: GridSpec) -> WedgeGrid:
    """X grid with step ``spec.dx`` inside phi^{-1} of the Y box, x0 on a node."""
    x0 = float(model.initial_points[:, 0].min())
    x_hi0 = float(model.initial_points[:, 0].max())
    lo_img = float(lmap.inverse(y_grid.x1[0]))
    hi_img = float(lmap.inverse(y_grid.x1[-1]))
    k_lo = int(math.floor((x0 - lo_img) / spec.dx))
    lo = x0 - k_lo * spec.dx
    n = int(math.floor((hi_img - lo) / spec.dx)) + 1
    if n - k_lo < 3 or lo < lo_img - 1e-12:
        raise LampertiError("X grid is empty")
    if x_hi0 > lo + (n - 1) * spec.dx:
        raise LampertiError("initial points outside the X grid")
    pad = min(x0 - lo, lo + (n - 1) * spec.dx - x_hi0)
    return WedgeGrid(1, float(spec.dx), lo, n, k_lo, y_grid.times.copy(), None, y_grid.eps_trunc, pad, x0)


def solve_lamperti(model: DiffusionModel, spec: GridSpec, T: float, eps_trunc: float = 1e-6,
                   n_terms: int = 4, method: str = "series", **engine_kw):
    """Full pipeline: map, transform, solve in Y, pull back onto an X grid.

    The Y grid carries the truncation (Y has unit diffusion); the X grid is
    the largest lattice of step ``spec.dx`` inside its preimage.  The Y step is
    ``spec.dx / sup A`` so it is at least as fine as the X lattice everywhere.
    """
    from .series import solve_series, solve_volterra

    if model.is_identity or model.d != 1:
        raise ModelError("Lamperti pipeline needs d = 1 with a scalar diffusion expression")
    if not spec.dx > 0:
        raise ModelError("grid step must be positive")
    cert = validate_model(model, [(-20.0, 20.0)])
    model = model.with_certificate(cert)
    # Y-drift bound and the X reach of the truncated Y box
    y_drift = cert.sup_drift / cert.inf_a + 0.5 * cert.sup_a1
    y_pad = truncation_radius(eps_trunc) * math.sqrt(2.0 * T) + y_drift * T
    reach = (y_pad + 2.0 * spec.dx) * cert.sup_a + 1.0
    x0 = model.initial_points[:, 0]
    lmap = build_map(model.diffusion, (float(x0.min()) - reach, float(x0.max()) + reach))
    ym = transform_model(model, lmap)
    y_grid = y_grid_for(lmap, ym, spec.dx / max(cert.sup_a, 1e-12), spec, T, eps_trunc)
    x_grid = x_grid_for(model, lmap, y_grid, spec)
    if method == "series":
        sol = solve_series(ym, y_grid, n_terms, **engine_kw)
        py = sol.partial_sum
    else:
        sol = solve_volterra(ym, y_grid, **engine_kw)
        py = sol
    return pullback_density(py, lmap, x_grid), sol, lmap
