"""Diffusion specification, assumption certificates, wedge grids and p0."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import special
from scipy.stats import qmc

from . import exprlang
from .exprlang import CoeffExpr
from .kernel import wedge_kernel


class ModelError(ValueError):
    """Model violates the boundedness / ellipticity assumptions."""


class UnboundedCoefficientError(ModelError):
    pass


class EllipticityError(ModelError):
    pass


class GridError(ValueError):
    pass


def _as_expr(e) -> CoeffExpr:
    if isinstance(e, str):
        return exprlang.parse(e)
    if isinstance(e, (int, float)):
        return exprlang.parse(repr(float(e)))
    return e


@dataclass(frozen=True)
class DiffusionModel:
    """dX = B(X) dt + A(X) dW with X_0 drawn from a finite mixture of points.

    ``drift`` holds one object per coordinate exposing ``evaluate(x)`` and
    ``differentiate(k)`` (a :class:`CoeffExpr` or a tabulated stand-in).
    """

    d: int
    drift: tuple
    initial_points: np.ndarray
    initial_weights: np.ndarray
    diffusion_kind: str = "identity"
    diffusion: object | None = None
    certificate: "Certificate | None" = None

    def __post_init__(self):
        if self.d < 1:
            raise ModelError("dimension must be >= 1")
        if len(self.drift) != self.d:
            raise ModelError(f"expected {self.d} drift components, got {len(self.drift)}")
        if self.diffusion_kind not in ("identity", "scalar"):
            raise ModelError(f"unknown diffusion kind {self.diffusion_kind!r}")
        if self.diffusion_kind == "identity" and self.diffusion is not None:
            raise ModelError("identity diffusion takes no expression")
        if self.diffusion_kind == "scalar":
            if self.d != 1:
                raise ModelError("scalar diffusion expressions are supported for d = 1 only")
            if self.diffusion is None:
                raise ModelError("scalar diffusion requires an expression")
        pts = np.atleast_2d(np.asarray(self.initial_points, dtype=float))
        w = np.atleast_1d(np.asarray(self.initial_weights, dtype=float))
        if pts.shape[1] != self.d or pts.shape[0] != w.size:
            raise ModelError("initial points / weights shape mismatch")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ModelError("mixture weights must be positive and sum to 1")
        for e in self.drift:
            if isinstance(e, CoeffExpr) and e.max_index > self.d:
                raise ModelError(f"drift uses x{e.max_index} but d = {self.d}")
        object.__setattr__(self, "initial_points", pts)
        object.__setattr__(self, "initial_weights", w)

    @classmethod
    def from_strings(cls, drift: Sequence[str] | str, x0=0.0, weights=None,
                     diffusion: str | None = None, d: int | None = None) -> "DiffusionModel":
        if isinstance(drift, (str, int, float)):
            drift = [drift]
        exprs = tuple(_as_expr(e) for e in drift)
        d = d or len(exprs)
        pts = np.asarray(x0, dtype=float)
        if pts.ndim == 0:
            pts = np.full((1, d), float(pts))
        elif pts.ndim == 1:
            pts = pts.reshape(-1, d) if d > 1 else pts.reshape(-1, 1)
        if weights is None:
            weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
        kind = "identity" if diffusion is None else "scalar"
        return cls(d, exprs, pts, np.asarray(weights, dtype=float), kind,
                   None if diffusion is None else _as_expr(diffusion))

    @property
    def is_identity(self) -> bool:
        return self.diffusion_kind == "identity"

    @property
    def zero_drift(self) -> bool:
        return all(isinstance(e, CoeffExpr) and e.is_constant and e.eval([0.0] * self.d) == 0.0
                   for e in self.drift)

    def drift_values(self, x: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [np.asarray(e.evaluate(x), dtype=float) for e in self.drift]

    def diffusion_values(self, x: Sequence[np.ndarray]) -> np.ndarray:
        """A(x) for d = 1 (ones for identity)."""
        if self.is_identity:
            return np.ones(np.broadcast_shapes(*[np.shape(c) for c in x]))
        return np.asarray(self.diffusion.evaluate(x), dtype=float)

    def with_certificate(self, cert: "Certificate") -> "DiffusionModel":
        return replace(self, certificate=cert)


@dataclass(frozen=True)
class Certificate:
    """Empirical bounds of the coefficients on a sampled box."""

    box: tuple
    n_samples: int
    sup_drift: float
    sup_grad_drift: float
    inf_a: float | None = None
    sup_a: float | None = None
    sup_a1: float | None = None
    sup_a2: float | None = None

    def to_dict(self) -> dict:
        return {"schema_version": "1", "box": [list(b) for b in self.box],
                "n_samples": self.n_samples, "sup_drift": self.sup_drift,
                "sup_grad_drift": self.sup_grad_drift, "inf_a": self.inf_a,
                "sup_a": self.sup_a, "sup_a_prime": self.sup_a1, "sup_a_second": self.sup_a2}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _sup(values, what: str, cap: float) -> float:
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise UnboundedCoefficientError(f"{what}: non-finite sampled value")
    s = float(np.max(np.abs(v))) if v.size else 0.0
    if s > cap:
        raise UnboundedCoefficientError(f"{what}: sampled sup {s:.4g} exceeds cap {cap:.4g}")
    return s


def validate_model(model: DiffusionModel, sample_box=None, n_samples: int = 4096,
                   cap: float = 1e6, seed: int = 0) -> Certificate:
    """Sample B, grad B (and A, A', A'' for scalar A) on a scrambled Sobol set."""
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    d = model.d
    if sample_box is None:
        sample_box = [(-10.0, 10.0)] * d
    box = np.asarray(sample_box, dtype=float).reshape(d, 2)
    n_pow = int(math.ceil(math.log2(n_samples)))
    pts = qmc.Sobol(d, scramble=True, seed=seed).random_base2(n_pow)[:n_samples]
    pts = qmc.scale(pts, box[:, 0], box[:, 1])
    # include the corners and the centre so a box containing 0 sees 0
    extra = np.vstack([box.mean(axis=1), box[:, 0], box[:, 1], np.clip(0.0, box[:, 0], box[:, 1])])
    pts = np.vstack([pts, extra])
    xs = [pts[:, k] for k in range(d)]
    try:
        b_sup = max(_sup(e.evaluate(xs), f"B^{i + 1}", cap) for i, e in enumerate(model.drift))
        g_sup = 0.0
        for i, e in enumerate(model.drift):
            for j in range(d):
                g_sup = max(g_sup, _sup(e.differentiate(j + 1).evaluate(xs), f"dB^{i + 1}/dx{j + 1}", cap))
        kw = {}
        if not model.is_identity:
            a = np.asarray(model.diffusion.evaluate(xs), dtype=float)
            _sup(a, "A", cap)
            inf_a = float(np.min(a))
            if inf_a <= 0:
                raise EllipticityError(f"sampled inf A = {inf_a:.4g} <= 0")
            a1 = model.diffusion.differentiate(1)
            kw = dict(inf_a=inf_a, sup_a=float(np.max(np.abs(a))),
                      sup_a1=_sup(a1.evaluate(xs), "A'", cap),
                      sup_a2=_sup(a1.differentiate(1).evaluate(xs), "A''", cap))
    except exprlang.EvaluationError as exc:
        raise UnboundedCoefficientError(f"coefficient evaluation failed: {exc}") from exc
    return Certificate(tuple(map(tuple, box.tolist())), int(pts.shape[0]), b_sup, g_sup, **kw)


# ---------------------------------------------------------------------------
# Grids


@dataclass(frozen=True)
class GridSpec:
    dx: float = 0.05
    n_time: int = 40
    dx2: float | None = None
    time_spacing: str = "sqrt"  # "sqrt": t_k = T (k/N)^2 ; "uniform"
    pad: float | None = None  # overrides the computed padding


def truncation_radius(eps_trunc: float) -> float:
    """r with P(|N(0,1)| > r) = eps_trunc."""
    return float(special.ndtri(1.0 - eps_trunc / 2.0))


@dataclass(frozen=True)
class WedgeGrid:
    """Shared lattice for m and x1 (so the diagonal m = x1 runs through nodes).

    ``x1 = lo + dx * arange(n)``, computed from ``origin`` (the node
    ``m_start``, normally the initial point) so that node sits there exactly;
    the m axis is ``x1[m_start:]``.  For d = 2 the second coordinate has its
    own uniform axis ``x2``.
    """

    d: int
    dx: float
    lo: float
    n: int
    m_start: int
    times: np.ndarray
    x2: np.ndarray | None = None
    eps_trunc: float = 1e-6
    pad: float = 0.0
    origin: float | None = None

    def axis(self, r: int = 1, idx=None) -> np.ndarray:
        """x1 coordinates of the lattice refined r times (indices in fine units)."""
        idx = np.arange((self.n - 1) * r + 1) if idx is None else np.asarray(idx)
        base = self.lo + self.m_start * self.dx if self.origin is None else self.origin
        return base + (self.dx / r) * (idx - r * self.m_start)

    @property
    def x1(self) -> np.ndarray:
        return self.axis()

    @property
    def m(self) -> np.ndarray:
        return self.x1[self.m_start:]

    @property
    def n_m(self) -> int:
        return self.n - self.m_start

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def slice_shape(self) -> tuple:
        shp = (self.n_m, self.n)
        return shp + ((self.x2.size,) if self.d == 2 else ())

    @property
    def dx2(self) -> float:
        return float(self.x2[1] - self.x2[0]) if self.d == 2 else 1.0

    def mesh(self):
        """Broadcastable node coordinates (m, [x1, x2...])."""
        m = self.m[:, None]
        x1 = self.x1[None, :]
        if self.d == 1:
            return m, [x1]
        return m[..., None], [x1[..., None], self.x2[None, None, :]]

    def mask(self) -> np.ndarray:
        """Wedge predicate m >= x1 on the slice shape."""
        i = np.arange(self.n_m)[:, None] + self.m_start
        j = np.arange(self.n)[None, :]
        msk = i >= j
        if self.d == 2:
            msk = np.broadcast_to(msk[..., None], self.slice_shape)
        return msk

    def weights(self) -> np.ndarray:
        """Quadrature weights over the wedge.

        Trapezoid on full cells; cells cut by the diagonal contribute only the
        triangle inside the wedge, integrated as a linear interpolant.
        """
        q = self.dx * self.dx
        w = np.zeros((self.n_m, self.n))
        im = self.n_m
        for a in range(im - 1):
            li = a + self.m_start
            jmax = min(li, self.n - 1)
            # full cells [li, li+1] x [lj, lj+1] with lj + 1 <= li
            if jmax >= 1:
                js = np.arange(0, jmax)
                w[a, js] += 0.25 * q
                w[a, js + 1] += 0.25 * q
                w[a + 1, js] += 0.25 * q
                w[a + 1, js + 1] += 0.25 * q
            if li + 1 < self.n:
                # diagonal cell: triangle (li,li), (li+1,li), (li+1,li+1)
                w[a, li] += q / 6.0
                w[a + 1, li] += q / 6.0
                w[a + 1, li + 1] += q / 6.0
        if self.d == 2:
            w2 = np.full(self.x2.size, self.dx2)
            w2[[0, -1]] *= 0.5
            w = w[..., None] * w2[None, None, :]
        return w

    def slab(self, t_index: int) -> float:
        return float(self.times[t_index])


def build_grid(spec: GridSpec, model: DiffusionModel, T: float, eps_trunc: float = 1e-6) -> WedgeGrid:
    if not T > 0:
        raise GridError("T must be positive")
    if not (0 < eps_trunc < 0.1):
        raise GridError("eps_trunc must lie in (0, 0.1)")
    if model.d > 2:
        raise GridError("dimension > 2 unsupported")
    if not spec.dx > 0 or spec.n_time < 1:
        raise GridError("inconsistent grid steps")
    r = truncation_radius(eps_trunc)
    cert = model.certificate
    drift_sup = cert.sup_drift if cert is not None else 0.0
    scale = max(1.0, cert.sup_a or 1.0) if cert is not None else 1.0
    pad = spec.pad if spec.pad is not None else scale * r * math.sqrt(2.0 * T) + drift_sup * T
    x0 = model.initial_points
    lo0, hi0 = float(x0[:, 0].min()), float(x0[:, 0].max())
    k_lo = int(math.ceil(pad / spec.dx))
    lo = lo0 - k_lo * spec.dx
    n = int(math.ceil((hi0 + pad - lo) / spec.dx)) + 1
    m_start = k_lo  # the node at lo0, the lowest reachable running maximum
    if n - m_start < 3:
        raise GridError("empty grid")
    if spec.time_spacing == "sqrt":
        times = T * (np.arange(spec.n_time + 1) / spec.n_time) ** 2
    elif spec.time_spacing == "uniform":
        times = np.linspace(0.0, T, spec.n_time + 1)
    else:
        raise GridError(f"unknown time spacing {spec.time_spacing!r}")
    x2 = None
    if model.d == 2:
        dx2 = spec.dx2 or spec.dx
        lo2 = float(x0[:, 1].min()) - math.ceil(pad / dx2) * dx2
        n2 = int(math.ceil((float(x0[:, 1].max()) + pad - lo2) / dx2)) + 1
        x2 = lo2 + dx2 * np.arange(n2)
    return WedgeGrid(model.d, float(spec.dx), lo, n, m_start, times, x2, eps_trunc, pad, lo0)


# ---------------------------------------------------------------------------
# Density fields


@dataclass
class DensityField:
    """Density values per time slice on the wedge nodes (off-wedge entries 0).

    ``analytic`` optionally evaluates the field in closed form at any time
    ``t`` on arbitrary node coordinates: ``analytic(t, m, xs)``.
    """

    grid: WedgeGrid
    values: np.ndarray
    tag: str = "closed-form"
    analytic: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        shp = (self.grid.times.size,) + self.grid.slice_shape
        if self.values.shape != shp:
            raise ValueError(f"field shape {self.values.shape} != grid shape {shp}")

    def slice(self, t_index: int) -> np.ndarray:
        return self.values[t_index]

    def l1_norm(self, t_index: int) -> float:
        return float(np.sum(self.grid.weights() * np.abs(self.values[t_index])))

    def l1_norms(self) -> np.ndarray:
        w = self.grid.weights()
        return np.array([float(np.sum(w * np.abs(v))) for v in self.values])

    def mass(self, t_index: int) -> float:
        return float(np.sum(self.grid.weights() * self.values[t_index]))

    def clipped(self) -> "DensityField":
        """Nonnegative view renormalised to the unclipped mass of each slice."""
        w = self.grid.weights()
        out = np.maximum(self.values, 0.0)
        for k in range(out.shape[0]):
            m0 = np.sum(w * self.values[k])
            m1 = np.sum(w * out[k])
            if m1 > 0 and m0 > 0:
                out[k] *= m0 / m1
        return DensityField(self.grid, out, self.tag + "+clipped")

    def __add__(self, other: "DensityField") -> "DensityField":
        return DensityField(self.grid, self.values + other.values, self.tag)


def p0_values(model: DiffusionModel, t: float, m, xs) -> np.ndarray:
    """Mixture of shifted wedge kernels evaluated at (m, x) and time t > 0."""
    out = 0.0
    for pt, w in zip(model.initial_points, model.initial_weights):
        b = m - pt[0]
        a = [xs[k] - pt[k] for k in range(model.d)]
        out = out + w * wedge_kernel(b, a if model.d > 1 else a[0], t, model.d)
    return np.asarray(out, dtype=float)


def assemble_p0(model: DiffusionModel, grid: WedgeGrid) -> DensityField:
    if not model.is_identity:
        raise ModelError("p0 requires identity diffusion; transform the model first (lamperti)")
    vals = np.zeros((grid.times.size,) + grid.slice_shape)
    m, xs = grid.mesh()
    msk = grid.mask()
    # a component starting above the lowest node jumps from 0 at its m = x0 row;
    # that row carries the mean of the one-sided limits so the wedge quadrature
    # stays consistent
    rows = []
    for pt, w in zip(model.initial_points, model.initial_weights):
        i = np.flatnonzero(np.isclose(grid.m, pt[0], rtol=0, atol=1e-9 * grid.dx))
        if i.size and i[0] > 0:
            rows.append((int(i[0]), DiffusionModel(model.d, model.drift, pt[None, :], np.ones(1)), w))
    for k, t in enumerate(grid.times):
        if t <= 0:
            continue
        v = np.broadcast_to(p0_values(model, t, m, xs), grid.slice_shape).copy()
        for i, sub, w in rows:
            v[i] -= 0.5 * w * p0_values(sub, t, m[i], [x[0] for x in xs])
        vals[k] = np.where(msk, v, 0.0)

    def analytic(t, mm, xx):
        return p0_values(model, t, mm, xx)

    return DensityField(grid, vals, "closed-form", analytic)
