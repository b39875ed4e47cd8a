"""Picard series and Volterra solver for the density of (M_t, X_t).

The operators act on a density slice history ``p(., s)`` and produce

    I^{k,alpha}[p](m,x;t) = int ds int da B^k(a) Cp(m,a;s) d_k q(m-a1, x-a; t-s)
    I^{k,beta}[p](m,x;t)  = int ds int da B^k(a) p(m,a;s) G_k(m,a,x; t-s)

with ``Cp(m,a;s) = int_{b<m} p(b,a;s) db`` and ``G_k`` the b-integral over
``b < m`` of the k-th partial of the wedge kernel ``q``.  For the m slot the
b-integral is ``q(m-a1, x-a) - q(x1-a1, x-a) 1{x1 >= a1}``: the kernel does
not vanish on the lower edge of its support, so the edge value stays.

Spatial integrals: the a-dependence of the integrand is ``W(a) f(w)`` with
``w = 2m - x1 - a1`` or ``w = x1 - a1``.  ``W`` is taken piecewise linear on
the lattice and integrated exactly against ``f`` through closed-form
antiderivatives, which keeps the small ``t - s`` limit stable.  Each output
row (fixed m) is then a 1-D convolution in a1.

Time integrals use ``s = t sin^2(theta)`` with Gauss-Legendre nodes in theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.special import gamma

from .kernel import INV_SQRT2PI, kernel_partial_mass_b, norm_cdf, norm_pdf, wedge_kernel
from .model import DensityField, DiffusionModel, ModelError, WedgeGrid, assemble_p0

C0 = INV_SQRT2PI
SLOTS = ("m", "1", "2")

# (coefficient, power of tau, argument, profile, one-sided, x2-factor)
# profiles: e0 = exp(-w^2/2tau), e1 = w e0, e2 = (1 - w^2/tau) e0; all times C0
_TERMS = {
    ("m", "alpha"): [(4.0, -1.5, "z", "e2", False, "g")],
    ("1", "alpha"): [(-2.0, -1.5, "z", "e2", False, "g")],
    ("2", "alpha"): [(2.0, -1.5, "z", "e1", False, "gp")],
    ("m", "beta"): [(2.0, -1.5, "z", "e1", False, "g"), (-2.0, -1.5, "y", "e1", True, "g")],
    ("1", "beta"): [(-1.0, -1.5, "z", "e1", False, "g"), (2.0, -1.5, "y", "e1", True, "g"),
                    (-1.0, -1.5, "y", "e1", False, "g")],
    ("2", "beta"): [(1.0, -0.5, "y", "e0", False, "gp"), (-1.0, -0.5, "z", "e0", False, "gp")],
}


class SeriesError(ValueError):
    pass


def _slot_component(k: str) -> int:
    """Drift component multiplying the operator for slot k (m uses B^1)."""
    return 0 if k in ("m", "1") else int(k) - 1


def _antiderivatives(profile: str, w, tau):
    """First and second antiderivatives K1, K2 of the profile (without C0)."""
    st = math.sqrt(tau)
    u = w / st
    e0 = np.exp(-0.5 * u * u)
    if profile == "e2":
        return w * e0, -tau * e0
    cdf = norm_cdf(u)
    root = math.sqrt(2.0 * math.pi * tau)
    if profile == "e1":
        return -tau * e0, -tau * root * cdf
    if profile == "e0":
        return root * cdf, root * (w * cdf + st * norm_pdf(u))
    raise ValueError(profile)


def hat_tables(profile: str, tau: float, h: float, n_lo: int, n_hi: int, one_sided: bool = False):
    """Integrals of the profile against lattice hat functions.

    Returns ``(full, left)`` indexed by ``n - n_lo`` for w-nodes ``n h``:
    ``full`` is the integral against the unit hat centred at ``n h``;
    ``left`` the integral against the half hat supported on ``[n h, n h + h]``
    (the half lying on the a-side below the node).
    """
    n = np.arange(n_lo - 1, n_hi + 2)
    w = n * h
    k1, k2 = _antiderivatives(profile, w, tau)
    if one_sided:
        k1_0, k2_0 = _antiderivatives(profile, np.zeros(1), tau)
        pos = w >= 0
        k2 = np.where(pos, k2 - k2_0 - k1_0 * w, 0.0)
        k1 = np.where(pos, k1 - k1_0, 0.0)
    full = (k2[2:] - 2.0 * k2[1:-1] + k2[:-2]) / h
    left = -k1[1:-1] + (k2[2:] - k2[1:-1]) / h
    return full, left


@dataclass
class _Source:
    """One input slice sampled on an a-lattice refined by ``r``.

    ``cp`` and ``p`` have shape (n_m, n_fine[, n2_fine]); columns outside
    ``[l_lo, l_hi)`` are zero and dropped.
    """

    r: int
    r2: int
    cp: np.ndarray
    p: np.ndarray
    l_lo: int


def cumulative_mass(values: np.ndarray, grid: WedgeGrid) -> np.ndarray:
    """Cp(m_i, a_l) = int_{b < m_i} p(b, a_l) db by trapezoid from the support edge."""
    h = grid.dx
    start = np.maximum(np.arange(grid.n) - grid.m_start, 0)
    cs = np.cumsum(values, axis=0)
    cols = np.arange(grid.n)
    first = values[start, cols]
    cp = h * (cs - 0.5 * first[None, ...] - 0.5 * values)
    rows = np.arange(grid.n_m)[:, None]
    ok = rows >= start[None, :]
    if values.ndim == 3:
        ok = ok[..., None]
    return np.where(ok, cp, 0.0)


class OperatorEngine:
    """Evaluates the Volterra operators on a grid for a given model."""

    def __init__(self, model: DiffusionModel, grid: WedgeGrid, n_theta: int = 24,
                 r_max: int = 16, refine_width: float = 1.5):
        if not model.is_identity:
            raise ModelError("series operators require identity diffusion")
        if model.d > 2:
            raise SeriesError("dimension > 2 unsupported")
        if model.d != grid.d:
            raise SeriesError("model / grid dimension mismatch")
        self.model = model
        self.grid = grid
        self.n_theta = n_theta
        self.r_max = r_max
        self.refine_width = refine_width
        x, w = np.polynomial.legendre.leggauss(n_theta)
        self.theta = 0.25 * math.pi * (x + 1.0)
        self.theta_w = 0.25 * math.pi * w
        self._drift_cache: dict = {}
        self.mask = grid.mask()

    # -- inputs ---------------------------------------------------------

    def _refinement(self, s: float) -> int:
        r = int(math.ceil(self.refine_width * self.grid.dx / math.sqrt(s)))
        return max(1, min(self.r_max, r))

    def _drift(self, r: int, r2: int, l_lo: int, l_hi: int):
        key = (r, r2, l_lo, l_hi)
        if key not in self._drift_cache:
            g = self.grid
            a1 = g.axis(r, np.arange(l_lo, l_hi))
            if g.d == 1:
                xs = [a1]
            else:
                a2 = g.x2[0] + (g.dx2 / r2) * np.arange((g.x2.size - 1) * r2 + 1)
                xs = [a1[:, None], a2[None, :]]
            vals = self.model.drift_values(xs)
            vals = [np.broadcast_to(v, np.broadcast_shapes(*[np.shape(c) for c in xs])) for v in vals]
            if len(self._drift_cache) > 64:
                self._drift_cache.clear()
            self._drift_cache[key] = vals
        return self._drift_cache[key]

    def analytic_source(self, s: float) -> _Source:
        """p0 of the model at time s on a refined a-lattice around the initial points."""
        g = self.grid
        model = self.model
        r = self._refinement(s)
        r2 = r if g.d == 2 else 1
        h = g.dx / r
        reach = 12.0 * math.sqrt(s) + 2 * g.dx
        x0 = model.initial_points[:, 0]
        n_fine = (g.n - 1) * r + 1
        l_lo = max(0, int(math.floor((x0.min() - reach - g.lo) / h)))
        l_hi = min(n_fine, int(math.ceil((x0.max() + reach - g.lo) / h)) + 1)
        a1 = g.axis(r, np.arange(l_lo, l_hi))
        m = g.m[:, None]
        if g.d == 1:
            xs = [a1[None, :]]
        else:
            a2 = g.x2[0] + (g.dx2 / r2) * np.arange((g.x2.size - 1) * r2 + 1)
            m = m[..., None]
            xs = [a1[None, :, None], a2[None, None, :]]
        cp = 0.0
        p = 0.0
        for pt, wt in zip(model.initial_points, model.initial_weights):
            a = [xs[k] - pt[k] for k in range(g.d)]
            arg = a if g.d > 1 else a[0]
            cp = cp + wt * kernel_partial_mass_b(m - pt[0], arg, s, g.d)
            p = p + wt * wedge_kernel(m - pt[0], arg, s, g.d)
        shape = np.broadcast_shapes(np.shape(m), *[np.shape(c) for c in xs])
        cp = np.broadcast_to(cp, shape).copy()
        p = np.broadcast_to(p, shape).copy()
        return _Source(r, r2, cp, p, l_lo)

    def grid_source(self, values: np.ndarray) -> _Source:
        return _Source(1, 1, cumulative_mass(values, self.grid), values, 0)

    # -- kernel application ---------------------------------------------

    def apply(self, src: _Source, tau: float, slots=SLOTS, kinds=("alpha", "beta")) -> np.ndarray:
        """Sum of I^{k,j} integrands (spatial part) at time lag tau, all (k, j) requested."""
        g = self.grid
        d = g.d
        r, r2 = src.r, src.r2
        h = g.dx / r
        n = g.n
        n_cols = src.p.shape[1]
        l_lo, l_hi = src.l_lo, src.l_lo + n_cols
        l_idx = l_lo + np.arange(n_cols)
        drift = self._drift(r, r2, l_lo, l_hi)
        i_lat = g.m_start + np.arange(g.n_m)
        j_lat = np.arange(n)
        rows = np.arange(g.n_m)[:, None]
        # group terms by (input kind, drift component, argument, x2 factor)
        groups: dict = {}
        for k in slots:
            if d == 1 and k == "2":
                continue
            for kind in kinds:
                for coef, pw, arg, prof, one, fac in _TERMS[(k, kind)]:
                    key = (kind, _slot_component(k), arg, fac)
                    groups.setdefault(key, []).append((coef * C0 * tau ** pw, prof, one))
        out = np.zeros(g.slice_shape)
        if d == 2:
            n2 = g.x2.size
            m2 = (n2 - 1) * r2
            h2 = g.dx2 / r2
            root = 1.0 / math.sqrt(2.0 * math.pi * tau)
            x2tab = {
                "g": root * hat_tables("e0", tau, h2, -m2, m2)[0],
                "gp": -root / tau * hat_tables("e1", tau, h2, -m2, m2)[0],
            }
        beyond = l_idx[None, :] > r * i_lat[:, None]
        col = r * i_lat - l_lo
        has = (col >= 0) & (col < n_cols)
        for (kind, comp, arg, fac), terms in groups.items():
            if arg == "z":
                lo, hi = 0, 2 * r * (n - 1)
                q_lo, q_hi = 2 * i_lat[0] - (n - 1), 2 * i_lat[-1]
            else:
                lo, hi = -r * (n - 1), r * (n - 1)
                q_lo, q_hi = 0, n - 1
            full = np.zeros(hi - lo + 1)
            left = np.zeros(hi - lo + 1)
            for c, prof, one in terms:
                f, lft = hat_tables(prof, tau, h, lo, hi, one)
                full += c * f
                left += c * lft
            wsrc = src.cp if kind == "alpha" else src.p
            W = wsrc * drift[comp][None, ...]
            # W vanishes beyond a1 = m; the column at a1 = m gets the half-hat fix below
            W = np.where(beyond[..., None] if d == 2 else beyond, 0.0, W)
            # polyphase: only w-indices r*q are needed, so split a1 by residue mod r
            V = np.zeros((g.n_m, q_hi - q_lo + 1) + ((n2,) if d == 2 else ()))
            for rho in range(r):
                c_min = -(-(l_lo + rho) // r)
                c_max = (l_hi - 1 + rho) // r
                if c_max < c_min:
                    continue
                cols = r * np.arange(c_min, c_max + 1) - rho - l_lo
                k_min = -(-(lo - rho) // r)
                k_max = (hi - rho) // r
                tab = full[r * np.arange(k_min, k_max + 1) + rho - lo]
                Wr = W[:, cols]
                if d == 1:
                    conv = signal.fftconvolve(Wr, tab[None, :], axes=1)
                else:
                    conv = 0.0
                    acc = None
                    for rho2 in range(r2):
                        c2 = np.arange(-(-rho2 // r2), (m2 + rho2) // r2 + 1)
                        cols2 = r2 * c2 - rho2
                        k2 = np.arange(-(-(-m2 - rho2) // r2), (m2 - rho2) // r2 + 1)
                        tab2 = x2tab[fac][r2 * k2 + rho2 + m2]
                        part = signal.fftconvolve(Wr[:, :, cols2], np.multiply.outer(tab, tab2)[None], axes=(1, 2))
                        # x2 output index q2 = j2 = idx + c2[0] + k2[0]
                        off2 = c2[0] + k2[0]
                        sel = np.arange(n2) - off2
                        ok2 = (sel >= 0) & (sel < part.shape[2])
                        piece = np.zeros(part.shape[:2] + (n2,))
                        piece[:, :, ok2] = part[:, :, sel[ok2]]
                        acc = piece if acc is None else acc + piece
                    conv = acc
                off = c_min + k_min - q_lo
                a0 = max(off, 0)
                a1 = min(off + conv.shape[1], V.shape[1])
                if a1 > a0:
                    V[:, a0:a1] += conv[:, a0 - off:a1 - off]
            if arg == "z":
                q = 2 * i_lat[:, None] - j_lat[None, :] - q_lo
            else:
                q = np.broadcast_to(j_lat[None, :] - q_lo, (g.n_m, n))
            res = V[rows, q]
            # half hat at the node a1 = m (W drops to zero just above it)
            wdiag = np.zeros((g.n_m,) + src.p.shape[2:])
            wdiag[has] = W[np.nonzero(has)[0], col[has]]
            if arg == "z":
                nd = r * (i_lat[:, None] - j_lat[None, :])
            else:
                nd = r * (j_lat[None, :] - i_lat[:, None])
            idx = np.clip(nd - lo, 0, hi - lo)
            corr = (left - full)[idx]
            if d == 1:
                res = res + corr * wdiag[:, None]
            else:
                q2 = r2 * np.arange(n2) + m2
                c2full = signal.fftconvolve(wdiag, x2tab[fac][None, :], axes=(1,))[:, q2]
                res = res + corr[..., None] * c2full[:, None, :]
            out += res
        return np.where(self.mask, out, 0.0)

    def time_integral(self, t: float, source_at, slots=SLOTS, kinds=("alpha", "beta")) -> np.ndarray:
        """int_0^t ds of the spatial integrand with input ``source_at(s)``."""
        out = np.zeros(self.grid.slice_shape)
        for th, wq in zip(self.theta, self.theta_w):
            s = t * math.sin(th) ** 2
            tau = t - s
            if s <= 0 or tau <= 0:
                continue
            src = source_at(s)
            if src is None:
                continue
            jac = 2.0 * t * math.sin(th) * math.cos(th)
            out += (wq * jac) * self.apply(src, tau, slots, kinds)
        return out


class SliceHistory:
    """Interpolates stored slices in sigma = sqrt(t) with local cubic Lagrange."""

    def __init__(self, times: np.ndarray, values: np.ndarray, known: int | None = None):
        self.sigma = np.sqrt(np.asarray(times, dtype=float))
        self.values = values
        self.known = len(times) if known is None else known

    def at(self, s: float) -> np.ndarray:
        sig = math.sqrt(s)
        n = self.known
        k = int(np.searchsorted(self.sigma[:n], sig))
        lo = max(0, min(k - 2, n - 4))
        idx = np.arange(lo, min(lo + 4, n))
        xs = self.sigma[idx]
        out = np.zeros(self.values.shape[1:])
        for a, ia in enumerate(idx):
            wgt = 1.0
            for b, _ in enumerate(idx):
                if b != a:
                    wgt *= (sig - xs[b]) / (xs[a] - xs[b])
            out += wgt * self.values[ia]
        return out


def _is_p0(field: DensityField) -> bool:
    return field.analytic is not None and field.tag == "closed-form"


def _operator_slice(engine: OperatorEngine, p: DensityField, t_index: int, slots, kinds):
    g = engine.grid
    if t_index < 1:
        raise SeriesError("operator slice needs a positive time index")
    t = float(g.times[t_index])
    if _is_p0(p):
        return engine.time_integral(t, engine.analytic_source, slots, kinds)
    hist = SliceHistory(g.times, p.values, known=t_index + 1)
    return engine.time_integral(t, lambda s: engine.grid_source(hist.at(s)), slots, kinds)


def apply_operator_alpha(k: str, p: DensityField, model: DiffusionModel, t_index: int,
                         engine: OperatorEngine | None = None) -> np.ndarray:
    """Slice of I^{k,alpha}[p] at ``grid.times[t_index]``; k in {"m", "1", "2"}."""
    engine = engine or OperatorEngine(model, p.grid)
    return _operator_slice(engine, p, t_index, (str(k),), ("alpha",))


def apply_operator_beta(k: str, p: DensityField, model: DiffusionModel, t_index: int,
                        engine: OperatorEngine | None = None) -> np.ndarray:
    """Slice of I^{k,beta}[p] at ``grid.times[t_index]``."""
    engine = engine or OperatorEngine(model, p.grid)
    return _operator_slice(engine, p, t_index, (str(k),), ("beta",))


def picard_step(p_n: DensityField, model: DiffusionModel, engine: OperatorEngine | None = None,
                tag: str = "series-term") -> DensityField:
    """p_{n+1} = I(p_n) = -sum_{k,j} I^{k,j}[p_n] on every positive time slice."""
    g = p_n.grid
    engine = engine or OperatorEngine(model, g)
    out = np.zeros_like(p_n.values)
    if not model.zero_drift:
        for k in range(1, g.times.size):
            out[k] = -_operator_slice(engine, p_n, k, SLOTS, ("alpha", "beta"))
    return DensityField(g, out, tag)


def term_bound(c: float, d: int, n: int, t) -> np.ndarray:
    """(2(d+1)C)^n t^{n/2} Gamma(1/2)^n / Gamma(1 + n/2)."""
    t = np.asarray(t, dtype=float)
    return (2 * (d + 1) * c) ** n * t ** (n / 2) * gamma(0.5) ** n / gamma(1 + n / 2)


def truncation_bound(c: float, d: int, n: int, t, tol: float = 1e-16) -> np.ndarray:
    """Sum of the term bounds after the n-th term (the series tail)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    k = n + 1
    while True:
        tb = term_bound(c, d, k, t)
        out = out + tb
        if np.all(tb <= tol * np.maximum(out, 1e-300)) or k > n + 2000:
            return out
        k += 1


def gamma_ratio_bound(c: float, d: int, n: int, t) -> np.ndarray:
    """Ratio of consecutive term bounds, term n+1 over term n."""
    t = np.asarray(t, dtype=float)
    return 2 * (d + 1) * c * np.sqrt(t) * gamma(0.5) * gamma(1 + n / 2) / gamma((n + 3) / 2)


@dataclass
class SeriesSolution:
    grid: WedgeGrid
    terms: list
    partial_sum: DensityField
    norms: np.ndarray  # (n_terms + 1, n_times)
    fitted_c: float
    truncation: np.ndarray  # per time slice bound for the tail after the last term
    meta: dict = field(default_factory=dict)

    @property
    def n_terms(self) -> int:
        return len(self.terms) - 1

    def report(self) -> dict:
        g = self.grid
        return {
            "schema_version": "1",
            "n_terms": self.n_terms,
            "times": g.times.tolist(),
            "term_l1_norms": self.norms.tolist(),
            "fitted_C": self.fitted_c,
            "truncation_bound": self.truncation.tolist(),
            "eps_trunc": g.eps_trunc,
            **self.meta,
        }


def _abel_integral(norm: np.ndarray, times: np.ndarray, k: int, n_theta: int = 64) -> float:
    """int_0^{t_k} (t_k - s)^{-1/2} ||p(s)|| ds with ||p|| interpolated linearly in sqrt(s)."""
    t = times[k]
    x, w = np.polynomial.legendre.leggauss(n_theta)
    th = 0.25 * math.pi * (x + 1.0)
    s = t * np.sin(th) ** 2
    f = np.interp(np.sqrt(s), np.sqrt(times[:k + 1]), norm[:k + 1])
    # ds / sqrt(t - s) = 2 sqrt(t) sin(theta) d theta
    return float(np.sum(0.25 * math.pi * w * f * 2.0 * math.sqrt(t) * np.sin(th)))


def fit_constant(norms: np.ndarray, times: np.ndarray, d: int, steps: int | None = None) -> float:
    """Smallest C with ||p_{n+1}(t)|| <= 2(d+1) C int_0^t (t-s)^{-1/2} ||p_n(s)|| ds
    over the positive slices and the first ``steps`` Picard steps (all by
    default); this is the operator bound the Gamma estimates are built from.
    ``steps=1`` fits C from p_1 alone."""
    norms = np.atleast_2d(np.asarray(norms, dtype=float))
    times = np.asarray(times, dtype=float)
    n_steps = norms.shape[0] - 1 if steps is None else min(steps, norms.shape[0] - 1)
    c = 0.0
    for n in range(n_steps):
        for k in range(1, times.size):
            den = 2 * (d + 1) * _abel_integral(norms[n], times, k)
            if den > 0:
                c = max(c, norms[n + 1, k] / den)
    return float(c)


def solve_series(model: DiffusionModel, grid: WedgeGrid, n_terms: int = 4,
                 engine: OperatorEngine | None = None, **engine_kw) -> SeriesSolution:
    if n_terms < 1:
        raise SeriesError("n_terms must be >= 1")
    if not model.is_identity:
        raise ModelError("series solver requires identity diffusion")
    if model.d != grid.d:
        raise SeriesError("model / grid dimension mismatch")
    engine = engine or OperatorEngine(model, grid, **engine_kw)
    p0 = assemble_p0(model, grid)
    terms = [p0]
    for _ in range(n_terms):
        terms.append(picard_step(terms[-1], model, engine))
    total = sum(t.values for t in terms)
    partial = DensityField(grid, total, f"partial-sum P{n_terms}")
    norms = np.array([t.l1_norms() for t in terms])
    c = fit_constant(norms, grid.times, model.d)
    trunc = truncation_bound(c, model.d, n_terms, grid.times)
    meta = {"fitted_C_first_step": fit_constant(norms, grid.times, model.d, steps=1)}
    return SeriesSolution(grid, terms, partial, norms, c, trunc, meta)


def solve_volterra(model: DiffusionModel, grid: WedgeGrid, engine: OperatorEngine | None = None,
                   n_corrector: int = 2, **engine_kw) -> DensityField:
    """Time-marching solution of p = p0 + I(p).

    Works with the remainder R = p - p0 = I(p0) + I(R); the slice at t_k
    only needs R on [0, t_k].  The unknown end of the history is predicted
    by extrapolation and then corrected.
    """
    if not model.is_identity:
        raise ModelError("Volterra solver requires identity diffusion")
    engine = engine or OperatorEngine(model, grid, **engine_kw)
    p0 = assemble_p0(model, grid)
    if model.zero_drift:
        return DensityField(grid, p0.values.copy(), "volterra")
    times = grid.times
    R = np.zeros_like(p0.values)
    for k in range(1, times.size):
        t = float(times[k])
        base = -engine.time_integral(t, engine.analytic_source)
        # predictor: extrapolate R in sigma from the known slices
        if k >= 2:
            R[k] = SliceHistory(times, R, known=k).at(t) if k >= 4 else R[k - 1] * math.sqrt(t / times[k - 1])
        for _ in range(n_corrector + 1):
            hist = SliceHistory(times, R, known=k + 1)
            new = base - engine.time_integral(t, lambda s: engine.grid_source(hist.at(s)))
            R[k] = new
    return DensityField(grid, p0.values + R, "volterra")
