"""Boundary traces, hitting-time densities, PDE residuals and the local slope."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import exprlang
from .exprlang import CoeffExpr
from .kernel import h_function
from .mc import PathEnsemble, _as_callable, _rng, simulate
from .model import DensityField, DiffusionModel, WedgeGrid


class AnalysisError(ValueError):
    pass


@dataclass
class ResidualReport:
    kind: str
    residual: np.ndarray  # interior grid (n_m, n) or boundary curve (n_m,)
    stations: np.ndarray  # boolean mask of the nodes that carry a residual
    weights: np.ndarray  # quadrature weights matching ``residual``
    dx: float
    t: float
    extra: dict = field(default_factory=dict)

    @property
    def linf(self) -> float:
        r = self.residual[self.stations]
        return float(np.max(np.abs(r))) if r.size else 0.0

    @property
    def l1(self) -> float:
        return float(np.sum(np.abs(self.residual[self.stations]) * self.weights[self.stations]))

    def to_dict(self) -> dict:
        return {"schema_version": "1", "kind": self.kind, "t": self.t, "dx": self.dx,
                "linf": self.linf, "l1": self.l1, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def refinement_slope(steps, norms) -> float:
    """Least-squares slope of log(norm) against log(step)."""
    x = np.log(np.asarray(steps, dtype=float))
    y = np.log(np.asarray(norms, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# traces and hitting times


def boundary_trace(field: DensityField, t_index: int, method: str = "richardson") -> np.ndarray:
    """p(m, m, x~; t) at every m station (rows of the grid).

    ``richardson`` extrapolates the values at x1 = m - dx and m - 2dx to the
    diagonal; ``node`` returns the stored diagonal values.
    """
    g = field.grid
    vals = field.values[t_index]
    i_lat = g.m_start + np.arange(g.n_m)
    rows = np.arange(g.n_m)
    if method == "node":
        return vals[rows, i_lat].copy()
    if method != "richardson":
        raise ValueError(f"unknown trace method {method!r}")
    if np.any(i_lat - 2 < 0):
        raise AnalysisError("insufficient interior nodes near the diagonal")
    return 2.0 * vals[rows, i_lat - 1] - vals[rows, i_lat - 2]


def _trace_in_time(field: DensityField, t: float, method: str) -> np.ndarray:
    g = field.grid
    times = g.times
    if t <= 0 or t > times[-1] * (1 + 1e-12):
        raise AnalysisError("time outside the grid")
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) <= 1e-12 * max(1.0, t):
        return boundary_trace(field, k, method)
    # local cubic Lagrange in sqrt(t)
    sig = np.sqrt(times)
    s = math.sqrt(t)
    j = int(np.searchsorted(sig, s))
    lo = max(1, min(j - 2, times.size - 4))
    idx = range(lo, min(lo + 4, times.size))
    out = 0.0
    for a in idx:
        w = 1.0
        for b in idx:
            if b != a:
                w *= (s - sig[b]) / (sig[a] - sig[b])
        out = out + w * boundary_trace(field, a, method)
    return out


def hitting_density(field: DensityField, level: float, t: float, method: str = "richardson") -> float:
    """Density of the first time X^1 reaches ``level``: half the x~-integrated trace."""
    g = field.grid
    m = g.m
    if not (m[0] <= level <= m[-1]):
        raise AnalysisError("level outside the grid")
    tr = _trace_in_time(field, t, method)
    if g.d == 2:
        w2 = np.full(g.x2.size, g.dx2)
        w2[[0, -1]] *= 0.5
        tr = tr @ w2
    return 0.5 * float(np.interp(level, m, tr))


def hitting_probability(field: DensityField, level: float, T: float, method: str = "richardson") -> float:
    """int_0^T of the hitting density over the grid slices (trapezoid in sqrt t)."""
    g = field.grid
    k = int(np.argmin(np.abs(g.times - T)))
    sig = np.sqrt(g.times[:k + 1])
    f = np.array([0.0] + [hitting_density(field, level, float(g.times[j]), method) for j in range(1, k + 1)])
    return float(np.trapezoid(f * 2.0 * sig, sig))


def coarsen(field: DensityField) -> DensityField:
    """Every other node of the field (step 2 dx), keeping the initial-point node."""
    g = field.grid
    j0 = g.m_start % 2
    cols = np.arange(j0, g.n, 2)
    rows = np.arange(0, g.n_m, 2)
    vals = field.values[:, rows][:, :, cols]
    if g.d == 2:
        vals = vals[..., ::2]
    x2 = g.x2[::2] if g.d == 2 else None
    cg = WedgeGrid(g.d, 2 * g.dx, float(g.x1[j0]), cols.size, (g.m_start - j0) // 2, g.times.copy(), x2,
                   g.eps_trunc, g.pad, g.origin)
    return DensityField(cg, np.ascontiguousarray(vals), field.tag + "+coarse")


# ---------------------------------------------------------------------------
# residuals


def _fd_weights(nodes: np.ndarray, x0: float) -> np.ndarray:
    """Weights of the first derivative at x0 from values at ``nodes`` (exact for polynomials)."""
    h = nodes - x0
    n = h.size
    vander = np.vander(h, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[1] = 1.0
    return np.linalg.solve(vander, rhs)


def _time_derivative(field: DensityField, k: int, order: int = 5) -> np.ndarray:
    """d_t p at slice k from the ``order`` nearest positive-time slices (t = 0 is singular)."""
    t = field.grid.times
    v = field.values
    if k <= 0 or k >= t.size:
        raise AnalysisError("time index out of range")
    first = 1 if t[0] == 0 else 0
    n_pos = t.size - first
    if n_pos < 3:
        raise AnalysisError("need at least 3 positive time slices")
    width = min(order, n_pos)
    lo = min(max(first, k - width // 2), t.size - width)
    idx = np.arange(lo, lo + width)
    w = _fd_weights(t[idx], t[k])
    return np.tensordot(w, v[idx], axes=(0, 0))


def _coeffs_1d(model: DiffusionModel, x: np.ndarray):
    """B, Sigma and the derivatives needed by L* for d = 1."""
    b_expr = model.drift[0]
    b = np.asarray(b_expr.evaluate([x]), dtype=float)
    db = np.asarray(b_expr.differentiate(1).evaluate([x]), dtype=float)
    if model.is_identity:
        one = np.ones_like(x)
        return b, db, one, 0 * one, 0 * one
    a_expr = model.diffusion
    a = np.asarray(a_expr.evaluate([x]), dtype=float)
    a1e = a_expr.differentiate(1)
    a1 = np.asarray(a1e.evaluate([x]), dtype=float)
    a2 = np.asarray(a1e.differentiate(1).evaluate([x]), dtype=float)
    return b, db, a * a, 2 * a * a1, 2 * a1 * a1 + 2 * a * a2


def fp_interior_residual(field: DensityField, t_index: int, model: DiffusionModel, margin: int = 2) -> ResidualReport:
    """|d_t p - L* p| at interior nodes at least ``margin`` cells from the diagonal.

    L* f = 1/2 Sigma f'' - (B - Sigma') f' - (B' - 1/2 Sigma'') f acting on x.
    """
    g = field.grid
    if g.times.size < 3:
        raise AnalysisError("need at least 3 time slices")
    if g.n < 2 * margin + 3:
        raise AnalysisError("grid too coarse")
    p = field.values[t_index]
    dt_p = _time_derivative(field, t_index)
    dx = g.dx
    x1 = g.x1
    i_lat = g.m_start + np.arange(g.n_m)
    j = np.arange(g.n)
    st = (j[None, :] <= i_lat[:, None] - margin) & (j[None, :] >= 1) & (j[None, :] <= g.n - 2)
    px = np.zeros_like(p)
    pxx = np.zeros_like(p)
    px[:, 1:-1] = (p[:, 2:] - p[:, :-2]) / (2 * dx)
    pxx[:, 1:-1] = (p[:, 2:] - 2 * p[:, 1:-1] + p[:, :-2]) / dx ** 2
    if g.d == 1:
        b, db, sig, dsig, ddsig = _coeffs_1d(model, x1)
        lstar = 0.5 * sig * pxx - (b - dsig) * px - (db - 0.5 * ddsig) * p
    else:
        if not model.is_identity:
            raise AnalysisError("d = 2 residual needs identity diffusion")
        X1, X2 = x1[None, :, None], g.x2[None, None, :]
        lap2 = np.zeros_like(p)
        p2 = np.zeros_like(p)
        dx2 = g.dx2
        p2[..., 1:-1] = (p[..., 2:] - p[..., :-2]) / (2 * dx2)
        lap2[..., 1:-1] = (p[..., 2:] - 2 * p[..., 1:-1] + p[..., :-2]) / dx2 ** 2
        bvals = model.drift_values([X1, X2])
        div = (np.asarray(model.drift[0].differentiate(1).evaluate([X1, X2]))
               + np.asarray(model.drift[1].differentiate(2).evaluate([X1, X2])))
        lstar = 0.5 * (pxx + lap2) - bvals[0] * px - bvals[1] * p2 - div * p
        st = st[..., None] & np.ones(g.x2.size, dtype=bool)[None, None, :]
        st[..., [0, -1]] = False
    res = dt_p - lstar
    res = np.where(st, res, 0.0)
    return ResidualReport("interior", res, st, g.weights(), dx, float(g.times[t_index]))


def boundary_residual(field: DensityField, t_index: int, model: DiffusionModel) -> ResidualReport:
    """Residual of B^1 p = sum_k d_{x_k}(Sigma^{1k} p) + 1/2 d_m(|A^1|^2 p) along m = x1.

    d_{x1} uses the one-sided 3-point stencil into the wedge; the derivative
    along the diagonal D = d_m + d_{x1} is centred, and d_m = D - d_{x1}.
    """
    g = field.grid
    p = field.values[t_index]
    dx = g.dx
    n_m = g.n_m
    rows = np.arange(n_m)
    i_lat = g.m_start + rows
    if np.any(i_lat - 2 < 0):
        raise AnalysisError("insufficient interior nodes near the diagonal")
    diag = p[rows, i_lat]
    p1 = p[rows, i_lat - 1]
    p2 = p[rows, i_lat - 2]
    m = g.m
    st = np.zeros(n_m, dtype=bool)
    st[1:-1] = True
    if g.d == 2:
        st = st[:, None] & np.ones(g.x2.size, dtype=bool)[None, :]
        st[:, [0, -1]] = False
    along = np.zeros_like(diag)
    along[1:-1] = (diag[2:] - diag[:-2]) / (2 * dx)
    if g.d == 1 and not model.is_identity:
        a_expr = model.diffusion
        sig = lambda x: np.asarray(a_expr.evaluate([x]), dtype=float) ** 2  # noqa: E731
        x = m
        s0, s1, s2 = sig(x), sig(x - dx), sig(x - 2 * dx)
        q0, q1, q2 = s0 * diag, s1 * p1, s2 * p2
        d_x_sigp = (3 * q0 - 4 * q1 + q2) / (2 * dx)
        d_x = (3 * diag - 4 * p1 + p2) / (2 * dx)
        d_m = along - d_x
        b = np.asarray(model.drift[0].evaluate([x]), dtype=float)
        res = b * diag - d_x_sigp - 0.5 * s0 * d_m
    else:
        d_x = (3 * diag - 4 * p1 + p2) / (2 * dx)
        d_m = along - d_x
        if g.d == 1:
            b = np.asarray(model.drift[0].evaluate([m]), dtype=float)
        else:
            b = np.asarray(model.drift[0].evaluate([m[:, None], g.x2[None, :]]), dtype=float)
        res = b * diag - d_x - 0.5 * d_m
    res = np.where(st, res, 0.0)
    w = np.full(n_m, dx)
    if g.d == 2:
        w = w[:, None] * np.full(g.x2.size, g.dx2)[None, :]
    return ResidualReport("boundary", res, st, w, dx, float(g.times[t_index]))


# ---------------------------------------------------------------------------
# local slope of the running maximum


def slope_target(field: DensityField, t: float, model: DiffusionModel, psi=None) -> float:
    """1/2 int Psi(m, m, x~) |A^1|^2 p(m, m, x~; t) dm dx~ from a density trace."""
    g = field.grid
    tr = _trace_in_time(field, t, "richardson")
    m = g.m
    if g.d == 1:
        a2 = model.diffusion_values([m]) ** 2
        ps = 1.0 if psi is None else _as_callable(psi)(m, [m])
        return 0.5 * float(np.trapezoid(np.broadcast_to(ps, m.shape) * a2 * tr, m))
    M, X2 = m[:, None], g.x2[None, :]
    ps = 1.0 if psi is None else _as_callable(psi)(M, [M, X2])
    inner = np.trapezoid(np.broadcast_to(ps, tr.shape) * tr, g.x2, axis=1)
    return 0.5 * float(np.trapezoid(inner, m))


def slope_estimator(ensemble: PathEnsemble, h: float, psi=None, model: DiffusionModel | None = None):
    """(2 / sqrt h) E[Psi |A^1| H((M - X^1) / (sqrt h |A^1|))] with its standard error."""
    model = model or ensemble.model
    xs = ensemble.xs()
    a = np.abs(model.diffusion_values(xs)) if model is not None else 1.0
    a = np.broadcast_to(a, ensemble.m.shape)
    ps = 1.0 if psi is None else _as_callable(psi)(ensemble.m, xs)
    ps = np.broadcast_to(np.asarray(ps, dtype=float), ensemble.m.shape)
    y = 2.0 / math.sqrt(h) * ps * a * h_function((ensemble.m - ensemble.x[:, 0]) / (math.sqrt(h) * a))
    n = y.size
    return float(np.sum(y) / n), float(np.std(y, ddof=1) / math.sqrt(n))


def local_slope(model: DiffusionModel, t: float, h_list, field: DensityField | None = None, psi=None,
                n_paths: int = 1_000_000, dt: float | None = None, seed: int = 0, threads: int = 1,
                ensemble: PathEnsemble | None = None) -> dict:
    """Convergence table of the Monte Carlo slope estimator toward the trace integral."""
    h_list = list(h_list)
    if not h_list:
        raise AnalysisError("empty h-list")
    if isinstance(psi, str):
        psi = exprlang.parse(psi)
    if isinstance(psi, CoeffExpr) and psi.is_constant and psi.eval([]) == 0.0:
        return {"schema_version": "1", "t": t, "target": 0.0,
                "rows": [{"h": h, "estimate": 0.0, "se": 0.0, "error": 0.0} for h in h_list]}
    if ensemble is None:
        ensemble = simulate(model, t, n_paths, dt or t / 10, seed, True, threads=threads)
    target = slope_target(field, t, model, psi) if field is not None else float("nan")
    rows = []
    for h in h_list:
        est, se = slope_estimator(ensemble, h, psi, model)
        rows.append({"h": h, "estimate": est, "se": se, "error": est - target})
    return {"schema_version": "1", "t": t, "target": target, "rows": rows,
            "n_paths": ensemble.n_paths, "dt": ensemble.dt}


def conditional_max_check(model: DiffusionModel, states, h: float, n_inner: int = 200_000, seed: int = 0):
    """Nested Monte Carlo of E[(M_{t,h} - M_t + X^1_t)_+ | state] against
    2 |A^1| sqrt(h) H((M_t - X^1_t) / (|A^1| sqrt h)).

    M_{t,h} is the maximum over [0, h] of the frozen-coefficient proxy
    A(X_t) W_u.  The inner samples draw the endpoint Y_h and average the
    excess over the bridge maximum in closed form,
    E[(max - c)_+ | Y_h] = (Y_h - c)_+ + int_L^inf exp(-2y(y - Y_h)/s^2) dy with
    L = max(c, Y_h).  Y_h is drawn from a normal shifted to the level c and
    reweighted by the likelihood ratio, so deep states stay resolvable.
    """
    out = []
    for k, (m, x) in enumerate(states):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        a = float(np.abs(model.diffusion_values([x[:1]]))[0])
        c = float(m - x[0])
        if c < 0:
            raise AnalysisError("state outside the wedge")
        sig = a * math.sqrt(h)
        rng = _rng(seed, k)
        y1 = c + sig * rng.standard_normal(n_inner)
        lr = np.exp((c * c - 2.0 * c * y1) / (2.0 * sig ** 2))
        low = np.maximum(c, y1)
        u = math.sqrt(2.0) * (low - 0.5 * y1) / sig
        tail = sig * math.sqrt(math.pi / 8.0) * special.erfcx(u) * np.exp(-2.0 * low * (low - y1) / sig ** 2)
        val = lr * (np.maximum(y1 - c, 0.0) + tail)
        mean = float(np.mean(val))
        se = float(np.std(val, ddof=1) / math.sqrt(n_inner))
        exact = 2.0 * sig * float(h_function(c / sig))
        out.append({"m": float(m), "x": x.tolist(), "mc": mean, "se": se, "exact": exact,
                    "passed": abs(mean - exact) <= 3 * se})
    return out
