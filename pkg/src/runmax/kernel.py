"""Closed-form Brownian wedge kernel and related Gaussian functions.

The wedge kernel is the joint density of ``(max_{s<=t} W^1_s, W_t)`` for a
d-dimensional standard Brownian motion started at 0::

    q(b, a; t) = 2 (2b - a1) / sqrt((2 pi)^d t^(d+2))
                 * exp(-(2b - a1)^2 / 2t - |a~|^2 / 2t) * 1{b >= 0, b >= a1}

Everything here is vectorised with numpy broadcasting.  For ``d == 1`` the
endpoint ``a`` may be given as a plain array; for ``d >= 2`` pass either an
array with trailing axis of length d or a sequence of d component arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

SQRT2PI = np.sqrt(2.0 * np.pi)
INV_SQRT2PI = 1.0 / SQRT2PI
EXP_FLOOR = -745.0


@dataclass(frozen=True)
class WedgePoint:
    b: float
    a: tuple
    t: float

    @property
    def d(self) -> int:
        return len(self.a)


def _exp(arg):
    """exp with arguments below the double underflow threshold mapped to exact 0."""
    arg = np.asarray(arg, dtype=float)
    out = np.exp(np.maximum(arg, EXP_FLOOR))
    return np.where(arg < EXP_FLOOR, 0.0, out)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("time must be positive")
    return t


def components(a, d: int) -> list[np.ndarray]:
    """Split an endpoint argument into its d coordinate arrays."""
    if isinstance(a, (list, tuple)) and len(a) == d and d > 1:
        return [np.asarray(c, dtype=float) for c in a]
    arr = np.asarray(a, dtype=float)
    if d == 1:
        if isinstance(a, (list, tuple)) and len(a) == 1:
            return [np.asarray(a[0], dtype=float)]
        return [arr]
    if arr.shape[-1:] != (d,):
        raise ValueError(f"endpoint must have trailing dimension {d}")
    return [arr[..., k] for k in range(d)]


def norm_cdf(x):
    """Standard Gaussian CDF via erfc (accurate in the lower tail)."""
    return special.ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return INV_SQRT2PI * _exp(-0.5 * x * x)


def _tail_factor(ac: Sequence[np.ndarray], t):
    """Gaussian density of the coordinates 2..d, and the squared norm."""
    sq = 0.0
    for c in ac[1:]:
        sq = sq + c * c
    n = len(ac) - 1
    return (2.0 * np.pi * t) ** (-0.5 * n), sq


def wedge_kernel(b, a, t, d: int = 1):
    """Joint density of the running maximum and the endpoint of Brownian motion."""
    t = _check_t(t)
    if d < 1:
        raise ValueError("dimension must be >= 1")
    b = np.asarray(b, dtype=float)
    ac = components(a, d)
    a1 = ac[0]
    z = 2.0 * b - a1
    norm, sq = _tail_factor(ac, t)
    expo = -(z * z + sq) / (2.0 * t)
    val = 2.0 * z * INV_SQRT2PI * t ** -1.5 * norm * _exp(expo)
    inside = (b >= 0) & (b >= a1)
    out = np.where(inside, val, 0.0)
    return out[()] if out.ndim == 0 else out


def wedge_kernel_partial(which: str, b, a, t, d: int = 1):
    """Analytic first partial derivative of ``wedge_kernel``.

    ``which`` is ``"b"`` or ``"a1"`` .. ``"ad"``.  Points on or outside the
    wedge boundary are rejected since the derivative is one-sided there.
    """
    t = _check_t(t)
    b = np.asarray(b, dtype=float)
    ac = components(a, d)
    a1 = ac[0]
    if np.any(~((b > 0) & (b > a1))):
        raise ValueError("derivative requested on or outside the wedge boundary")
    z = 2.0 * b - a1
    norm, sq = _tail_factor(ac, t)
    e = _exp(-(z * z + sq) / (2.0 * t)) * norm * INV_SQRT2PI
    db = 4.0 * t ** -1.5 * (1.0 - z * z / t) * e
    if which == "b":
        out = db
    elif which == "a1":
        out = -0.5 * db
    elif which.startswith("a") and which[1:].isdigit() and 2 <= int(which[1:]) <= d:
        k = int(which[1:]) - 1
        out = 2.0 * z * t ** -1.5 * e * (-ac[k] / t)
    else:
        raise ValueError(f"unknown derivative slot {which!r}")
    out = np.asarray(out)
    return out[()] if out.ndim == 0 else out


def kernel_partial_mass_b(m, a, t, d: int = 1):
    """Integral of the wedge kernel over b < m (closed form)."""
    t = _check_t(t)
    m = np.asarray(m, dtype=float)
    ac = components(a, d)
    y = ac[0]
    norm, sq = _tail_factor(ac, t)
    g = norm * _exp(-sq / (2.0 * t))
    z = 2.0 * m - y
    val = INV_SQRT2PI / np.sqrt(t) * (_exp(-y * y / (2.0 * t)) - _exp(-z * z / (2.0 * t))) * g
    out = np.where(m >= np.maximum(y, 0.0), val, 0.0)
    return out[()] if out.ndim == 0 else out


def h_function(theta):
    """H(theta) = phi(theta) - theta * Phi(-theta)."""
    th = np.asarray(theta, dtype=float)
    pos = th > 0
    tp = np.where(pos, th, 0.0)
    # for theta > 0 use the scaled complementary error function to keep the
    # relative accuracy in the tail: Phi(-th) = phi(th) * mills(th)
    mills = special.erfcx(tp / np.sqrt(2.0)) * np.sqrt(np.pi / 2.0)
    hp = norm_pdf(tp) * (1.0 - tp * mills)
    hn = norm_pdf(th) - th * norm_cdf(-th)
    out = np.where(pos, np.maximum(hp, 0.0), hn)
    return out[()] if out.ndim == 0 else out


def h_function_derivative(theta):
    return -norm_cdf(-np.asarray(theta, dtype=float))


def gaussian_envelope(b, u, v, t, d: int = 1):
    """Restrained Gaussian envelope evaluated with time argument 2t.

    Returns (2 pi t)^{-(d+1)/2} exp(-(b^2 + u^2 + |v|^2) / 4t) on b >= 0, u >= 0.
    ``v`` holds the d - 1 trailing coordinates (ignored for d = 1).
    """
    t = _check_t(t)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    sq = b * b + u * u
    if d > 1:
        for c in components(v, d - 1):
            sq = sq + c * c
    val = (2.0 * np.pi * t) ** (-0.5 * (d + 1)) * _exp(-sq / (4.0 * t))
    out = np.where((b >= 0) & (u >= 0), val, 0.0)
    return out[()] if out.ndim == 0 else out


# Gaussian convolution identities used to bound the series terms.

def convolution_exponent_lhs(u, v, w, s, t):
    u, v, w = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (u, v, w))
    return np.sum((u - v) ** 2, axis=-1) / (t - s) + np.sum((v - w) ** 2, axis=-1) / s


def convolution_exponent_rhs(u, v, w, s, t):
    u, v, w = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (u, v, w))
    c = s / t * u + (t - s) / t * w
    return t / (s * (t - s)) * np.sum((v - c) ** 2, axis=-1) + np.sum((u - w) ** 2, axis=-1) / t


def half_line_convolution(b, u, w, s, t):
    """Closed form of the integral over v < b of the product of the two
    wide Gaussians exp(-(u-v)^2/4(t-s))/sqrt(2 pi (t-s)) and
    exp(-(w-v)^2/4s)/sqrt(2 pi s).

    The Gaussian in v has variance 2 s (t-s) / t, hence the 1/sqrt(2) in the
    CDF argument.
    """
    c = s / t * u + (t - s) / t * w
    arg = np.sqrt(t / (2.0 * s * (t - s))) * (b - c)
    return np.sqrt(2.0) * _exp(-(u - w) ** 2 / (4.0 * t)) / np.sqrt(2.0 * np.pi * t) * norm_cdf(arg)


def full_space_convolution(u, w, s, t):
    """Closed form of the same product integrated over all of R^k."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    k = u.shape[-1]
    sq = np.sum((u - w) ** 2, axis=-1)
    return 2.0 ** (k / 2) * _exp(-sq / (4.0 * t)) / np.sqrt((2.0 * np.pi * t) ** k)


def gaussian_tail_bound(u):
    """Upper bound exp(-u^2/2)/2 for Phi(-u), u > 0."""
    u = np.asarray(u, dtype=float)
    return 0.5 * _exp(-0.5 * u * u)
