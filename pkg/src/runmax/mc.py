"""Monte Carlo ground truth for (M_t, X_t).

Paths are split into fixed-size blocks; block ``k`` draws from a Philox
stream keyed by ``(seed, k)``, so the sample set does not depend on how the
blocks are spread over threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, ndimage

from . import exprlang
from .exprlang import CoeffExpr
from .kernel import norm_cdf
from .model import DensityField, DiffusionModel, WedgeGrid

BLOCK = 1 << 16


class SimulationError(RuntimeError):
    pass


@dataclass
class PathEnsemble:
    m: np.ndarray  # running maximum of X^1, shape (n,)
    x: np.ndarray  # endpoint, shape (n, d)
    n_paths: int
    dt: float
    T: float
    seed: int
    bridge: bool
    d: int
    snapshots: dict = field(default_factory=dict)  # time -> (m, x)
    integral: np.ndarray | None = None  # per-path time integral of the integrand
    initial: tuple | None = None  # (m0, x0) per path
    model: DiffusionModel | None = field(default=None, repr=False)

    def xs(self) -> list[np.ndarray]:
        return [self.x[:, k] for k in range(self.d)]


def _rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) & (2**64 - 1)) | (int(block) << 64)))


def _as_callable(F) -> Callable:
    """Turn an expression (text or CoeffExpr over m, x1..xd) into f(m, xs)."""
    if isinstance(F, str):
        F = exprlang.parse(F)
    if isinstance(F, CoeffExpr):
        expr = F
        return lambda m, xs: expr.evaluate(list(xs), m=m)
    return F


def _simulate_block(model: DiffusionModel, T: float, n_steps: int, nb: int, seed: int, block: int,
                    bridge: bool, snap_steps: dict, integrand):
    rng = _rng(seed, block)
    d = model.d
    dt = T / n_steps
    sq = math.sqrt(dt)
    pts = model.initial_points
    if pts.shape[0] == 1:
        x = np.repeat(pts, nb, axis=0)
    else:
        idx = np.searchsorted(np.cumsum(model.initial_weights), rng.random(nb), side="right")
        x = pts[np.minimum(idx, pts.shape[0] - 1)].copy()
    x0 = x.copy()
    m = x[:, 0].copy()
    zero = model.zero_drift
    ident = model.is_identity
    snaps = {}
    acc = None
    if integrand is not None:
        prev = np.asarray(integrand(m, [x[:, k] for k in range(d)]), dtype=float)
        acc = np.zeros(nb)
    try:
        for step in range(1, n_steps + 1):
            xs = [x[:, k] for k in range(d)]
            z = rng.standard_normal((nb, d))
            u = 1.0 - rng.random(nb)
            if ident:
                a = 1.0
                xn = x + sq * z
                v = dt
            else:
                a = np.asarray(model.diffusion.evaluate(xs), dtype=float)
                xn = x + (sq * a)[:, None] * z
                v = a * a * dt
            if not zero:
                bvals = model.drift_values(xs)
                for k in range(d):
                    xn[:, k] += np.broadcast_to(bvals[k], (nb,)) * dt
            y0 = x[:, 0]
            y1 = xn[:, 0]
            if bridge:
                ymax = 0.5 * (y0 + y1 + np.sqrt((y1 - y0) ** 2 - 2.0 * v * np.log(u)))
                m = np.maximum(m, ymax)
            else:
                m = np.maximum(m, y1)
            x = xn
            if not np.all(np.isfinite(x)):
                raise SimulationError("non-finite state along a path")
            if integrand is not None:
                cur = np.asarray(integrand(m, [x[:, k] for k in range(d)]), dtype=float)
                acc += 0.5 * dt * (prev + cur)
                prev = cur
            if step in snap_steps:
                snaps[snap_steps[step]] = (m.copy(), x.copy())
    except exprlang.EvaluationError as exc:
        raise SimulationError(f"model evaluation failed along a path: {exc}") from exc
    return m, x, snaps, acc, x0


def simulate(model: DiffusionModel, T: float, n_paths: int, dt: float, seed: int = 0,
             bridge: bool = True, snapshot_times=(), integrand=None, threads: int = 1,
             block: int = BLOCK) -> PathEnsemble:
    """Euler-Maruyama with optional Brownian-bridge maximum per step."""
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    if dt > T / 10 * (1 + 1e-12):
        raise ValueError("dt must be <= T/10")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n_steps = int(round(T / dt))
    dt = T / n_steps
    snap_steps = {}
    for s in snapshot_times:
        k = int(round(s / dt))
        if not 0 < k <= n_steps:
            raise ValueError(f"snapshot time {s} outside (0, T]")
        snap_steps[k] = float(s)
    if integrand is not None:
        integrand = _as_callable(integrand)
    sizes = [min(block, n_paths - k * block) for k in range((n_paths + block - 1) // block)]

    def run(k):
        return _simulate_block(model, T, n_steps, sizes[k], seed, k, bridge, snap_steps, integrand)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(k) for k in range(len(sizes))]
    m = np.concatenate([p[0] for p in parts])
    x = np.concatenate([p[1] for p in parts])
    snaps = {s: (np.concatenate([p[2][s][0] for p in parts]), np.concatenate([p[2][s][1] for p in parts]))
             for s in snap_steps.values()}
    acc = np.concatenate([p[3] for p in parts]) if integrand is not None else None
    x0 = np.concatenate([p[4] for p in parts])
    return PathEnsemble(m, x, n_paths, dt, T, int(seed), bool(bridge), model.d, snaps, acc,
                        (x0[:, 0].copy(), x0), model)


def estimate_expectation(ensemble: PathEnsemble, F, at: float | None = None) -> tuple[float, float]:
    """Sample mean and standard error of F(M, X) (at the final time or a snapshot)."""
    f = _as_callable(F)
    if at is None:
        m, x = ensemble.m, ensemble.x
    else:
        m, x = ensemble.snapshots[at]
    vals = np.broadcast_to(np.asarray(f(m, [x[:, k] for k in range(ensemble.d)]), dtype=float), m.shape)
    n = vals.size
    mean = float(np.sum(vals) / n)
    se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def silverman_bandwidth(ensemble: PathEnsemble) -> float:
    """Silverman's rule on the rotated coordinates (m - x1, m + x1)/sqrt(2); the smaller one."""
    n = ensemble.m.size
    u = (ensemble.m - ensemble.x[:, 0]) / math.sqrt(2.0)
    v = (ensemble.m + ensemble.x[:, 0]) / math.sqrt(2.0)
    dim = ensemble.d + 1
    factor = (4.0 / (dim + 2)) ** (1.0 / (dim + 4)) * n ** (-1.0 / (dim + 4))
    sig = min(np.std(u), np.std(v))
    return float(factor * sig)


def _linear_bin(coords: list[np.ndarray], lo: list[float], step: list[float], shape: tuple) -> np.ndarray:
    hist = np.zeros(shape)
    pos = [(c - l) / s for c, l, s in zip(coords, lo, step)]
    base = [np.floor(p).astype(np.int64) for p in pos]
    frac = [p - b for p, b in zip(pos, base)]
    dim = len(coords)
    for corner in range(1 << dim):
        idx = []
        wt = 1.0
        for k in range(dim):
            off = (corner >> k) & 1
            idx.append(base[k] + off)
            wt = wt * (frac[k] if off else 1.0 - frac[k])
        ok = np.ones(coords[0].shape, dtype=bool)
        for k in range(dim):
            ok &= (idx[k] >= 0) & (idx[k] < shape[k])
        np.add.at(hist, tuple(i[ok] for i in idx), np.broadcast_to(wt, ok.shape)[ok])
    return hist


def estimate_density(ensemble: PathEnsemble, grid: WedgeGrid, bandwidth: float | None = None) -> DensityField:
    """Reflected Gaussian KDE of (M_T, X_T) on the wedge nodes.

    Samples are linearly binned on the square lattice, smoothed with an
    isotropic Gaussian, then the mass that leaked across the diagonal
    m = x1 (and below the lowest initial point in m) is folded back, which
    is the reflected-kernel estimate.
    """
    if ensemble.n_paths < 10_000:
        raise ValueError("density estimation needs at least 1e4 paths")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(ensemble)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    g = grid
    n = g.n
    # pad the lattice so smoothing does not clip at the box edge
    pad = int(math.ceil(4 * bandwidth / g.dx)) + 2
    lo = g.x1[0] - pad * g.dx
    N = n + 2 * pad
    coords = [ensemble.m, ensemble.x[:, 0]]
    los = [lo, lo]
    steps = [g.dx, g.dx]
    shape = [N, N]
    sig = [bandwidth / g.dx, bandwidth / g.dx]
    if g.d == 2:
        coords.append(ensemble.x[:, 1])
        los.append(g.x2[0] - pad * g.dx2)
        steps.append(g.dx2)
        shape.append(g.x2.size + 2 * pad)
        sig.append(bandwidth / g.dx2)
    hist = _linear_bin(coords, los, steps, tuple(shape))
    cell = g.dx * g.dx * (g.dx2 if g.d == 2 else 1.0)
    dens = ndimage.gaussian_filter(hist, sig, mode="constant", truncate=5.0) / (ensemble.n_paths * cell)
    # fold across the diagonal (a node on the diagonal receives its own mirror image)
    i = np.arange(N)[:, None]
    j = np.arange(N)[None, :]
    keep = i >= j
    if g.d == 2:
        keep = keep[..., None]
    dens = np.where(keep, dens + np.swapaxes(dens, 0, 1), 0.0)
    # fold across the lowest attainable maximum
    r0 = g.m_start + pad
    for k in range(0, r0 + 1):
        if r0 + k < N:
            dens[r0 + k] += dens[r0 - k]
    dens[:r0] = 0.0
    sl = dens[r0:r0 + g.n_m, pad:pad + n]
    if g.d == 2:
        sl = sl[..., pad:pad + g.x2.size]
    vals = np.zeros((g.times.size,) + g.slice_shape)
    k = int(np.argmin(np.abs(g.times - ensemble.T)))
    vals[k] = np.where(g.mask(), sl, 0.0)
    return DensityField(g, vals, "mc-estimate")


def generator_expression(F: CoeffExpr, model: DiffusionModel) -> Callable:
    """LF = B.grad_x F + 1/2 sum Sigma^{ij} d_ij F as a callable f(m, xs)."""
    d = model.d
    grads = [F.differentiate(k + 1) for k in range(d)]
    hess = [grads[k].differentiate(k + 1) for k in range(d)]

    def lf(m, xs):
        xs = list(xs)
        out = 0.0
        bvals = model.drift_values(xs)
        for k in range(d):
            out = out + bvals[k] * grads[k].evaluate(xs, m=m)
        if model.is_identity:
            for k in range(d):
                out = out + 0.5 * hess[k].evaluate(xs, m=m)
        else:
            a = model.diffusion_values(xs)
            out = out + 0.5 * a * a * hess[0].evaluate(xs, m=m)
        return out

    return lf


def _boundary_term(F: CoeffExpr, model: DiffusionModel, T: float, series) -> tuple[float, float]:
    """1/2 int_0^T int dF/dm(m, m) |A^1|^2 p(m, m; s) dm ds for d = 1 identity.

    The p0 part uses int_0^T q(u, u; s) ds = 4 Phi(-u / sqrt T); the series
    remainder uses the diagonal node values integrated in sqrt(s).
    Returns the value and a quadrature error estimate.
    """
    from .analysis import boundary_trace

    fm = F.differentiate("m")

    def g(mm):
        mm = np.asarray(mm, dtype=float)
        return 0.5 * fm.evaluate([mm], m=mm)

    total = 0.0
    err = 0.0
    for pt, w in zip(model.initial_points, model.initial_weights):
        x0 = float(pt[0])
        val, e = integrate.quad(lambda u: float(g(x0 + u)) * 4.0 * norm_cdf(-u / math.sqrt(T)),
                                0.0, np.inf, epsabs=1e-11, limit=200)
        total += w * val
        err += w * e
    if series is not None and not model.zero_drift:
        field = series.partial_sum if hasattr(series, "partial_sum") else series
        grid = field.grid
        p0 = None
        from .model import assemble_p0
        p0 = assemble_p0(model, grid)
        kT = int(np.argmin(np.abs(grid.times - T)))
        if abs(grid.times[kT] - T) > 1e-12:
            raise ValueError("series grid does not contain T")
        sig = np.sqrt(grid.times[:kT + 1])
        rem = DensityField(grid, field.values - p0.values, "remainder")
        vals = []
        gm = g(grid.m)
        for k in range(kT + 1):
            if k == 0:
                vals.append(0.0)
                continue
            tr = boundary_trace(rem, k, method="node")
            vals.append(float(np.trapezoid(gm * tr, grid.m)))
        f_sig = np.asarray(vals) * 2.0 * sig
        coarse = np.trapezoid(f_sig[::2], sig[::2]) if kT % 2 == 0 else np.nan
        fine = np.trapezoid(f_sig, sig)
        total += fine
        if np.isfinite(coarse):
            err += abs(fine - coarse) / 3.0
    return float(total), float(err)


def weak_identity_gap(model: DiffusionModel, F, T: float, series=None, n_paths: int = 200_000,
                      dt: float = 1e-3, seed: int = 0, threads: int = 1, quad_tol: float = 1e-3) -> dict:
    """Both sides of E F(V_T) = E F(V_0) + int E LF(V_s) ds + boundary term."""
    if model.d != 1 or not model.is_identity:
        raise ValueError("weak identity check implemented for d = 1, identity diffusion")
    if isinstance(F, str):
        F = exprlang.parse(F)
    if series is not None:
        grid = (series.partial_sum if hasattr(series, "partial_sum") else series).grid
        if grid.d != model.d:
            raise ValueError("series / model mismatch")
    f = _as_callable(F)
    if F.is_constant:
        c = F.eval([])
        return {"lhs": c, "rhs_initial": c, "rhs_generator": 0.0, "rhs_boundary": 0.0,
                "gap": 0.0, "mc_radius": 0.0, "truncation": 0.0, "quadrature": 0.0,
                "tolerance": 0.0, "passed": True}
    lf = generator_expression(F, model)
    ens = simulate(model, T, n_paths, dt, seed, True, integrand=lf, threads=threads)
    m0, x0 = ens.initial
    f_T = np.asarray(f(ens.m, ens.xs()), dtype=float)
    f_0 = np.asarray(f(m0, [x0[:, k] for k in range(model.d)]), dtype=float)
    per_path = f_T - ens.integral
    lhs = float(np.mean(f_T))
    init = float(sum(w * F.eval(list(p), m=p[0]) for p, w in zip(model.initial_points, model.initial_weights)))
    gen = float(np.mean(ens.integral))
    bnd, qerr = _boundary_term(F, model, T, series)
    gap = lhs - init - gen - bnd
    se = float(np.std(per_path - f_0, ddof=1) / math.sqrt(n_paths))
    trunc = 0.0
    if series is not None and hasattr(series, "truncation"):
        kT = int(np.argmin(np.abs(series.grid.times - T)))
        fsup = float(np.max(np.abs(f(series.grid.m[:, None], [series.grid.x1[None, :]]))))
        trunc = float(series.truncation[kT]) * fsup
    tol = 3.0 * se + trunc + quad_tol + qerr
    return {"lhs": lhs, "rhs_initial": init, "rhs_generator": gen, "rhs_boundary": bnd, "gap": gap,
            "mc_se": se, "mc_radius": 3.0 * se, "truncation": trunc, "quadrature": quad_tol + qerr,
            "tolerance": tol, "passed": bool(abs(gap) <= tol), "n_paths": n_paths, "dt": ens.dt, "T": T}
